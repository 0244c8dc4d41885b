"""Trajectory planning with learnable action queries decoded in a single pass."""

from .data import EgoState, UnifiedClip
from .errors import ContractError, DimensionError, NumericAbort, OrderingError
from .model import ModelConfig, Planner
from .rewards import RewardConfig

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "DimensionError",
    "EgoState",
    "ModelConfig",
    "NumericAbort",
    "OrderingError",
    "Planner",
    "RewardConfig",
    "UnifiedClip",
]
