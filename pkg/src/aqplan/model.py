"""The end-to-end planner: encoder + action queries + decoder + policy std."""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .data import TrajectoryStats, UnifiedClip
from .decoder import LOG_STD_MAX, LOG_STD_MIN, ActionDecoder, ActionQueryBank, init_action_queries
from .encoder import FEATURE_DIM, ContextEncoder, HiddenStates, tokenize_batch
from .errors import ContractError
from .layers import Module
from .numerics import Tensor


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose ("data", "init", "policy", ...)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(zlib.crc32(name.encode()),)))


def substream_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(2**31 - 1))


@dataclass
class ModelConfig:
    d_model: int = 128
    enc_layers: int = 4
    n_heads: int = 4
    mlp_ratio: int = 2
    dec_blocks: int = 2
    horizon: int = 10
    coord_dims: int = 2
    refine_layers: list[int] = field(default_factory=lambda: [1])
    var_floor: float = 1e-4
    init_log_std: float = math.log(0.3)

    def validate(self, prefix: str = "model") -> list[str]:
        errs = []
        for name in ("d_model", "enc_layers", "n_heads", "mlp_ratio", "dec_blocks", "horizon", "coord_dims"):
            if int(getattr(self, name)) < 1:
                errs.append(f"{prefix}.{name}: must be >= 1")
        if self.n_heads >= 1 and self.d_model % self.n_heads:
            errs.append(f"{prefix}.n_heads: must divide d_model")
        if not self.refine_layers:
            errs.append(f"{prefix}.refine_layers: need at least one layer index")
        elif any(not 0 <= i < self.enc_layers for i in self.refine_layers):
            errs.append(f"{prefix}.refine_layers: indices must lie in [0, enc_layers)")
        if self.var_floor <= 0:
            errs.append(f"{prefix}.var_floor: must be > 0")
        if not LOG_STD_MIN <= self.init_log_std <= LOG_STD_MAX:
            errs.append(f"{prefix}.init_log_std: must lie in [{LOG_STD_MIN}, {LOG_STD_MAX}]")
        return errs


class Planner(Module):
    def __init__(self, cfg: ModelConfig, stats: TrajectoryStats, seed: int = 0, zero_out: bool = False):
        super().__init__()
        errs = cfg.validate()
        if errs:
            raise ContractError("; ".join(errs))
        if stats.mean.shape != (cfg.horizon, cfg.coord_dims):
            raise ContractError(f"stats shape {stats.mean.shape} != ({cfg.horizon}, {cfg.coord_dims})")
        self.cfg = cfg
        rng = substream(seed, "init")
        self.encoder = self.child(
            "encoder", ContextEncoder(rng, cfg.d_model, cfg.enc_layers, cfg.n_heads, cfg.mlp_ratio, FEATURE_DIM, zero_out)
        )
        self.decoder = self.child(
            "decoder",
            ActionDecoder(
                rng, cfg.d_model, cfg.n_heads, cfg.dec_blocks, cfg.mlp_ratio, cfg.horizon, cfg.coord_dims,
                tuple(cfg.refine_layers), zero_out,
            ),
        )
        bank = init_action_queries(stats, cfg.d_model, substream_seed(seed, "queries"), cfg.var_floor)
        self.query_meta = bank.init_meta
        self.queries = self.param("queries", bank.queries)
        self.log_std = self.param("log_std", np.full((cfg.horizon, cfg.coord_dims), cfg.init_log_std))

    @property
    def decode_count(self) -> int:
        return self.decoder.counter.value

    def query_bank(self) -> ActionQueryBank:
        return ActionQueryBank(self.queries.data.copy(), self.cfg.horizon, self.cfg.coord_dims, dict(self.query_meta))

    def policy_log_std(self) -> Tensor:
        return nx.clamp(self.log_std, LOG_STD_MIN, LOG_STD_MAX)

    def encode(self, clips: list[UnifiedClip]) -> HiddenStates:
        tokens, valid = tokenize_batch(clips)
        return self.encoder(tokens, valid)

    def __call__(self, clips: list[UnifiedClip]) -> Tensor:
        """Mean waypoints (B, H, N) for a batch of clips."""
        hidden = self.encode(clips)
        return self.decoder.decode(self.queries, hidden).waypoints

    def predict(self, clips: list[UnifiedClip], batch_size: int = 64) -> np.ndarray:
        out = []
        with nx.no_grad():
            for i in range(0, len(clips), batch_size):
                out.append(self(clips[i:i + batch_size]).data)
        return np.concatenate(out) if out else np.zeros((0, self.cfg.horizon, self.cfg.coord_dims))

    def config_dict(self) -> dict:
        return asdict(self.cfg)
