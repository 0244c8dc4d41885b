"""Ego-history tokenizer and a small pre-norm transformer encoder.

The encoder output is the context the action queries cross-attend to. Every
layer's output is kept so the refinement stage can read an intermediate one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DT, MANEUVERS, UnifiedClip, intent_from_text
from .errors import DimensionError
from .layers import MLP, LayerNorm, Linear, Module, MultiHeadAttention
from .numerics import Tensor

POS_SCALE = 10.0
VEL_SCALE = 10.0
ACC_SCALE = 2.0
TIME_SCALE = 3.0
TIME_FREQS = (0.5, 1.0, 2.0, 4.0)

# feature layout: kinematics(6) | t(1) | sin/cos(t) (8) | summary flag(1) | intent one-hot(5)
N_KIN = 6
F_TIME = N_KIN
F_SIN = F_TIME + 1
F_SUMMARY = F_SIN + 2 * len(TIME_FREQS)
F_INTENT = F_SUMMARY + 1
FEATURE_DIM = F_INTENT + len(MANEUVERS)


@dataclass
class SceneTokenSequence:
    tokens: np.ndarray  # (L, F); last row is the summary token

    @property
    def length(self) -> int:
        return self.tokens.shape[0]


def _time_features(t: float) -> list[float]:
    out = [t / TIME_SCALE]
    for f in TIME_FREQS:
        out += [np.sin(f * t), np.cos(f * t)]
    return out


def tokenize(clip: UnifiedClip, dt: float = DT) -> SceneTokenSequence:
    """One token per history state plus a trailing summary token carrying the intent tag."""
    rows = []
    for s in clip.history:
        row = np.zeros(FEATURE_DIM)
        row[0:2] = np.asarray(s.position) / POS_SCALE
        row[2:4] = np.asarray(s.velocity) / VEL_SCALE
        row[4:6] = np.asarray(s.acceleration) / ACC_SCALE
        row[F_TIME:F_SUMMARY] = _time_features(s.t_offset)
        rows.append(row)
    summary = np.zeros(FEATURE_DIM)
    summary[F_TIME:F_SUMMARY] = _time_features(clip.history[-1].t_offset + dt)
    summary[F_SUMMARY] = 1.0
    intent = intent_from_text(clip.reasoning_text)
    if intent is not None:
        summary[F_INTENT + MANEUVERS.index(intent)] = 1.0
    rows.append(summary)
    return SceneTokenSequence(np.stack(rows))


def tokenize_batch(clips: list[UnifiedClip]) -> tuple[np.ndarray, np.ndarray]:
    """Stack token sequences, left-padding shorter histories.

    Returns ``(tokens (B, L, F), valid (B, L))``.
    """
    seqs = [tokenize(c).tokens for c in clips]
    length = max(s.shape[0] for s in seqs)
    tokens = np.zeros((len(seqs), length, FEATURE_DIM))
    valid = np.zeros((len(seqs), length), dtype=bool)
    for i, s in enumerate(seqs):
        tokens[i, length - s.shape[0]:] = s
        valid[i, length - s.shape[0]:] = True
    return tokens, valid


@dataclass
class HiddenStates:
    h: Tensor  # (B, L, D)
    layers: list[Tensor]  # per-layer outputs, each (B, L, D)
    valid: np.ndarray | None = None  # (B, L) key mask; None means all valid

    @property
    def d_model(self) -> int:
        return self.h.shape[-1]

    def key_mask(self) -> np.ndarray | None:
        # (B, 1, L) -> broadcasts over query rows
        return None if self.valid is None or self.valid.all() else self.valid[:, None, :]


class EncoderLayer(Module):
    def __init__(self, rng, d_model: int, n_heads: int, mlp_ratio: int, zero_out: bool = False):
        super().__init__()
        self.ln1 = self.child("ln1", LayerNorm(d_model))
        self.attn = self.child("attn", MultiHeadAttention(rng, d_model, n_heads, zero_out=zero_out))
        self.ln2 = self.child("ln2", LayerNorm(d_model))
        self.mlp = self.child("mlp", MLP(rng, d_model, mlp_ratio * d_model, zero_out=zero_out))

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        x = x + self.attn(self.ln1(x), mask=mask)
        return x + self.mlp(self.ln2(x))


class ContextEncoder(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        d_model: int = 128,
        n_layers: int = 4,
        n_heads: int = 4,
        mlp_ratio: int = 2,
        feature_dim: int = FEATURE_DIM,
        zero_out: bool = False,
    ):
        super().__init__()
        self.d_model, self.feature_dim = d_model, feature_dim
        self.embed = self.child("embed", Linear(rng, feature_dim, d_model))
        self.summary = self.param("summary", rng.normal(0.0, 0.02, size=d_model))
        self.layers = [
            self.child(f"layer{i}", EncoderLayer(rng, d_model, n_heads, mlp_ratio, zero_out)) for i in range(n_layers)
        ]

    def embed_tokens(self, tokens: np.ndarray) -> Tensor:
        if tokens.shape[-1] != self.feature_dim:
            raise DimensionError(f"token width {tokens.shape[-1]} != encoder feature dim {self.feature_dim}")
        x = self.embed(Tensor(tokens))
        # learned summary embedding added only on summary rows
        flag = tokens[..., F_SUMMARY:F_SUMMARY + 1]
        return x + Tensor(flag) * self.summary

    def __call__(self, tokens: np.ndarray, valid: np.ndarray | None = None) -> HiddenStates:
        if tokens.ndim == 2:
            tokens = tokens[None]
            valid = None if valid is None else valid[None]
        if tokens.shape[-2] < 2:
            raise DimensionError("encoder needs at least two tokens")
        mask = None
        if valid is not None and not valid.all():
            mask = valid[:, None, :]
        x = self.embed_tokens(tokens)
        outs = []
        for layer in self.layers:
            x = layer(x, mask)
            outs.append(x)
        return HiddenStates(x, outs, valid)


def encode(tokens: SceneTokenSequence | np.ndarray, encoder: ContextEncoder) -> HiddenStates:
    """Functional form: encode one token sequence (L, F) or a batch (B, L, F)."""
    arr = tokens.tokens if isinstance(tokens, SceneTokenSequence) else tokens
    return encoder(arr)
