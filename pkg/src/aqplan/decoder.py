"""Learnable action queries decoded against encoder context in a single pass.

Query rows are the flattened (step, coordinate) grid in step-major order:
row ``N*i + n`` regresses coordinate ``n`` of waypoint ``i``.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .data import TrajectoryStats
from .encoder import HiddenStates
from .errors import ContractError, DimensionError
from .layers import MLP, LayerNorm, Linear, Module, MultiHeadAttention
from .numerics import Tensor

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0


@dataclass
class ActionQueryBank:
    queries: np.ndarray  # (H*N, D)
    horizon: int
    coord_dims: int
    init_meta: dict = field(default_factory=dict)

    @property
    def d_model(self) -> int:
        return self.queries.shape[1]


def init_action_queries(
    stats: TrajectoryStats,
    d_model: int,
    seed: int,
    var_floor: float = 1e-4,
) -> ActionQueryBank:
    """Sample each query row's D entries from Normal(mean, max(var, floor)) of its (step, coord) slot."""
    if var_floor <= 0:
        raise ContractError(f"var_floor must be positive, got {var_floor}")
    if stats.mean.ndim != 2 or stats.mean.shape != stats.var.shape:
        raise DimensionError(f"stats mean/var must share an (H, N) shape, got {stats.mean.shape}/{stats.var.shape}")
    horizon, coords = stats.mean.shape
    mean = stats.mean.reshape(-1, 1)
    std = np.sqrt(np.maximum(stats.var, var_floor)).reshape(-1, 1)
    rng = np.random.default_rng(seed)
    q = mean + std * rng.standard_normal((horizon * coords, d_model))
    meta = {"stats_source": stats.source_id, "stats_count": stats.count, "seed": seed, "var_floor": var_floor}
    return ActionQueryBank(q, horizon, coords, meta)


class DecodeCounter:
    """Thread-safe count of (clip x forward pass) decoder invocations."""

    def __init__(self):
        self._lock = threading.Lock()
        self._value = 0

    def add(self, n: int) -> None:
        with self._lock:
            self._value += n

    @property
    def value(self) -> int:
        return self._value

    def __deepcopy__(self, memo):
        # copies start their own count
        return DecodeCounter()

    def __getstate__(self):
        return {"value": self._value}

    def __setstate__(self, state):
        self._lock = threading.Lock()
        self._value = state["value"]


@dataclass
class TrajectoryPrediction:
    waypoints: Tensor  # (B, H, N)
    refined_hidden: Tensor  # (B, H*N, D)


class DecoderBlock(Module):
    """Bidirectional self-attention over queries, cross-attention into context, MLP."""

    def __init__(self, rng, d_model: int, n_heads: int, mlp_ratio: int, zero_out: bool = False):
        super().__init__()
        self.ln_sa = self.child("ln_sa", LayerNorm(d_model))
        self.sa = self.child("sa", MultiHeadAttention(rng, d_model, n_heads, zero_out=zero_out))
        self.ln_ca = self.child("ln_ca", LayerNorm(d_model))
        self.ln_ctx = self.child("ln_ctx", LayerNorm(d_model))
        self.ca = self.child("ca", MultiHeadAttention(rng, d_model, n_heads, zero_out=zero_out))
        self.ln_mlp = self.child("ln_mlp", LayerNorm(d_model))
        self.mlp = self.child("mlp", MLP(rng, d_model, mlp_ratio * d_model, zero_out=zero_out))

    def __call__(self, q: Tensor, ctx: Tensor, self_mask=None, ctx_mask=None) -> Tensor:
        q = q + self.sa(self.ln_sa(q), mask=self_mask)
        q = q + self.ca(self.ln_ca(q), self.ln_ctx(ctx), mask=ctx_mask)
        return q + self.mlp(self.ln_mlp(q))


class RefinementModule(Module):
    """One cross-attention pass over selected intermediate encoder layers, then an MLP."""

    def __init__(self, rng, d_model: int, n_heads: int, mlp_ratio: int, zero_out: bool = False):
        super().__init__()
        self.ln_q = self.child("ln_q", LayerNorm(d_model))
        self.ln_ctx = self.child("ln_ctx", LayerNorm(d_model))
        self.ca = self.child("ca", MultiHeadAttention(rng, d_model, n_heads, zero_out=zero_out))
        self.ln_mlp = self.child("ln_mlp", LayerNorm(d_model))
        self.mlp = self.child("mlp", MLP(rng, d_model, mlp_ratio * d_model, zero_out=zero_out))

    def __call__(self, q: Tensor, layers: list[Tensor], ctx_mask=None) -> Tensor:
        if not layers:
            raise ContractError("refinement needs at least one intermediate layer")
        ctx = layers[0] if len(layers) == 1 else nx.concat(layers, axis=-2)
        if ctx_mask is not None and len(layers) > 1:
            ctx_mask = np.concatenate([ctx_mask] * len(layers), axis=-1)
        q = q + self.ca(self.ln_q(q), self.ln_ctx(ctx), mask=ctx_mask)
        return q + self.mlp(self.ln_mlp(q))


class ActionDecoder(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        d_model: int = 128,
        n_heads: int = 4,
        n_blocks: int = 2,
        mlp_ratio: int = 2,
        horizon: int = 10,
        coord_dims: int = 2,
        refine_layers: tuple[int, ...] = (1,),
        zero_out: bool = False,
    ):
        super().__init__()
        if n_blocks < 1:
            raise ContractError("decoder needs at least one block")
        self.d_model, self.horizon, self.coord_dims = d_model, horizon, coord_dims
        self.refine_layers = tuple(refine_layers)
        self.blocks = [
            self.child(f"block{i}", DecoderBlock(rng, d_model, n_heads, mlp_ratio, zero_out)) for i in range(n_blocks)
        ]
        self.refiner = self.child("refine", RefinementModule(rng, d_model, n_heads, mlp_ratio, zero_out))
        # regression head starts as a row average so Gaussian-initialised queries seed the output
        self.head = self.child("head", Linear(rng, d_model, 1, zero=True))
        if not zero_out:
            self.head.w.data = np.full((d_model, 1), 1.0 / d_model)
        self.counter = DecodeCounter()

    @property
    def n_rows(self) -> int:
        return self.horizon * self.coord_dims

    def run_blocks(self, q: Tensor, hidden: HiddenStates, self_mask=None) -> Tensor:
        ctx_mask = hidden.key_mask()
        for block in self.blocks:
            q = block(q, hidden.h, self_mask=self_mask, ctx_mask=ctx_mask)
        return q

    def refine(self, q: Tensor, hidden: HiddenStates) -> Tensor:
        layers = [hidden.layers[i] for i in self.refine_layers]
        return self.refiner(q, layers, hidden.key_mask())

    def regress(self, refined: Tensor) -> Tensor:
        """Map every query row to one scalar and reshape to (B, H, N)."""
        out = self.head(refined)  # (B, R, 1)
        return out.reshape(out.shape[:-2] + (self.horizon, self.coord_dims))

    def decode(self, queries: Tensor, hidden: HiddenStates) -> TrajectoryPrediction:
        """Produce every waypoint of every clip in one forward invocation."""
        if queries.shape != (self.n_rows, self.d_model):
            raise DimensionError(f"queries shape {queries.shape} != ({self.n_rows}, {self.d_model})")
        if hidden.d_model != self.d_model:
            raise DimensionError(f"context width {hidden.d_model} != decoder width {self.d_model}")
        batch = hidden.h.shape[0]
        q = nx.broadcast_to(queries, (batch, self.n_rows, self.d_model))
        q = self.run_blocks(q, hidden)
        refined = self.refine(q, hidden)
        self.counter.add(batch)
        return TrajectoryPrediction(self.regress(refined), refined)


# ---------------------------------------------------------------------------
# stochastic policy head
# ---------------------------------------------------------------------------

LOG_2PI = math.log(2.0 * math.pi)


def gaussian_log_density(x: np.ndarray, mean: Tensor, log_std: Tensor) -> Tensor:
    """Diagonal-Gaussian log pdf summed over the trailing (H, N) axes.

    ``x`` is (..., G, H, N); ``mean`` broadcasts as (..., 1, H, N).
    """
    z = (Tensor(x) - mean) * nx.exp(-log_std)
    per = -0.5 * z * z - log_std - 0.5 * LOG_2PI
    return per.sum(axis=(-2, -1))


def gaussian_kl(mean_p: Tensor, log_std_p: Tensor, mean_q, log_std_q) -> Tensor:
    """KL(p || q) between diagonal Gaussians, summed over the trailing (H, N) axes."""
    mean_q, log_std_q = nx.as_tensor(mean_q), nx.as_tensor(log_std_q)
    var_ratio = nx.exp(2.0 * (log_std_p - log_std_q))
    diff = (mean_p - mean_q) * nx.exp(-log_std_q)
    per = log_std_q - log_std_p + 0.5 * (var_ratio + diff * diff) - 0.5
    return per.sum(axis=(-2, -1))


def policy_sample(
    mean_traj: np.ndarray,
    log_std: np.ndarray,
    group_size: int,
    seed: int | np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``group_size`` trajectories around ``mean_traj``; return (samples, log densities)."""
    if group_size < 2:
        raise ContractError(f"group size must be >= 2, got {group_size}")
    mean_traj = np.asarray(mean_traj, dtype=np.float64)
    log_std = np.asarray(log_std, dtype=np.float64)
    if mean_traj.shape != log_std.shape:
        raise DimensionError(f"mean {mean_traj.shape} and log_std {log_std.shape} differ")
    if (log_std < LOG_STD_MIN - 1e-12).any() or (log_std > LOG_STD_MAX + 1e-12).any():
        raise ContractError(f"log_std outside [{LOG_STD_MIN}, {LOG_STD_MAX}]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eps = rng.standard_normal((group_size,) + mean_traj.shape)
    samples = mean_traj + np.exp(log_std) * eps
    logp = (-0.5 * eps * eps - log_std - 0.5 * LOG_2PI).reshape(group_size, -1).sum(axis=1)
    return samples, logp


# ---------------------------------------------------------------------------
# token-by-token reference
# ---------------------------------------------------------------------------


class AutoregressiveBaseline:
    """Emit the H*N scalars one decoder invocation at a time with a causal mask.

    Uses the decoder's own parameters; previously emitted scalars are fed back
    by shifting their query rows. No key/value cache, matching a plain
    sequential decoder.
    """

    def __init__(self, decoder: ActionDecoder):
        self.decoder = decoder
        self.counter = DecodeCounter()

    def decode(self, queries: Tensor, hidden: HiddenStates) -> np.ndarray:
        dec = self.decoder
        batch, rows = hidden.h.shape[0], dec.n_rows
        emitted = np.zeros((batch, rows))
        with nx.no_grad():
            for k in range(rows):
                prefix = np.broadcast_to(queries.data[: k + 1], (batch, k + 1, dec.d_model)).copy()
                prefix[:, :k, :] += emitted[:, :k, None]
                q = dec.run_blocks(Tensor(prefix), hidden, self_mask=nx.causal_mask(k + 1))
                refined = dec.refine(q, hidden)
                out = dec.head(refined).data[..., 0]
                emitted[:, k] = out[:, k]
                self.counter.add(batch)
        return emitted.reshape(batch, dec.horizon, dec.coord_dims)
