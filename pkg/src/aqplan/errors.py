"""Exception types shared across the package."""


class ContractError(ValueError):
    """A precondition on arguments or configuration was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


# Shape errors and dimension errors are the same failure seen from different layers.
ShapeError = DimensionError


class NumericAbort(FloatingPointError):
    """A non-finite value appeared where training or evaluation cannot continue."""


class OrderingError(RuntimeError):
    """A pipeline stage was requested before its prerequisites exist."""
