"""Parameter containers and transformer building blocks on top of :mod:`numerics`."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .errors import DimensionError
from .numerics import Tensor


class Module:
    """Owns named parameters and child modules; names are dotted paths."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for cname, c in self._children.items():
            out.update(c.named_parameters(f"{prefix}{cname}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        nx.zero_grad(self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise DimensionError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{k}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.copy()


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, zero: bool = False):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.w = self.param("w", np.zeros((d_in, d_out)) if zero else xavier(rng, d_in, d_out))
        self.b = self.param("b", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"linear expects last dim {self.d_in}, got {x.shape}")
        return x @ self.w + self.b


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gain = self.param("gain", np.ones(d))
        self.bias = self.param("bias", np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention(Module):
    """Multi-head attention; queries and keys/values may come from different sequences."""

    def __init__(self, rng: np.random.Generator, d_model: int, n_heads: int, zero_out: bool = False):
        super().__init__()
        if d_model % n_heads:
            raise DimensionError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.d_model, self.n_heads = d_model, n_heads
        self.q = self.child("q", Linear(rng, d_model, d_model))
        self.k = self.child("k", Linear(rng, d_model, d_model))
        self.v = self.child("v", Linear(rng, d_model, d_model))
        self.o = self.child("o", Linear(rng, d_model, d_model, zero=zero_out))

    def _split(self, x: Tensor) -> Tensor:
        # (..., L, D) -> (..., heads, L, D/heads)
        lead, length = x.shape[:-2], x.shape[-2]
        dh = self.d_model // self.n_heads
        x = x.reshape(lead + (length, self.n_heads, dh))
        return nx.swapaxes(x, -2, -3)

    def __call__(self, x: Tensor, context: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
        ctx = x if context is None else context
        q, k, v = self._split(self.q(x)), self._split(self.k(ctx)), self._split(self.v(ctx))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.ndim >= 3:
                # (..., Lq, Lk) -> broadcast over heads
                mask = np.expand_dims(mask, -3)
        h = nx.scaled_dot_attention(q, k, v, mask)
        h = nx.swapaxes(h, -2, -3)
        h = h.reshape(h.shape[:-2] + (self.d_model,))
        return self.o(h)


class MLP(Module):
    def __init__(self, rng: np.random.Generator, d_model: int, hidden: int, zero_out: bool = False):
        super().__init__()
        self.fc1 = self.child("fc1", Linear(rng, d_model, hidden))
        self.fc2 = self.child("fc2", Linear(rng, hidden, d_model, zero=zero_out))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nx.gelu(self.fc1(x)))
