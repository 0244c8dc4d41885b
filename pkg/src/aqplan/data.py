"""Unified clip schema, corpus I/O, trajectory statistics, prompts and synthetic clips."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

log = logging.getLogger(__name__)

SOURCES = ("navsim", "nuscenes", "waymo", "argoverse2", "kitti", "mapillary", "once", "idd")
# Generated clips carry their own tag so they can never be mistaken for ingested data.
SYNTHETIC_SOURCE = "synthetic"
MANEUVERS = ("straight", "left-turn", "right-turn", "stop", "accelerate")

DT = 0.5
DEFAULT_HORIZON = 10
COORD_BOUND = 1000.0


@dataclass(frozen=True)
class EgoState:
    t_offset: float
    position: tuple[float, float]
    velocity: tuple[float, float] = (0.0, 0.0)
    acceleration: tuple[float, float] = (0.0, 0.0)

    def to_dict(self) -> dict:
        return {
            "t_offset": self.t_offset,
            "position": list(self.position),
            "velocity": list(self.velocity),
            "acceleration": list(self.acceleration),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EgoState":
        return cls(
            float(d["t_offset"]),
            tuple(float(v) for v in d["position"]),
            tuple(float(v) for v in d.get("velocity", (0.0, 0.0))),
            tuple(float(v) for v in d.get("acceleration", (0.0, 0.0))),
        )

    def values(self) -> list[float]:
        return [self.t_offset, *self.position, *self.velocity, *self.acceleration]


@dataclass
class UnifiedClip:
    clip_id: str
    source: str
    history: list[EgoState]
    actions: np.ndarray
    reasoning_text: str | None = None
    camera_refs: list[str] | None = None

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.float64)

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]

    def to_dict(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "source": self.source,
            "history": [s.to_dict() for s in self.history],
            "actions": self.actions.tolist(),
            "reasoning_text": self.reasoning_text,
            "camera_refs": None if self.camera_refs is None else list(self.camera_refs),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UnifiedClip":
        return cls(
            clip_id=str(d["clip_id"]),
            source=str(d["source"]),
            history=[EgoState.from_dict(s) for s in d["history"]],
            actions=np.asarray(d["actions"], dtype=np.float64).reshape(-1, 2),
            reasoning_text=d.get("reasoning_text"),
            camera_refs=d.get("camera_refs"),
        )


def clip_problems(clip: UnifiedClip, horizon: int | None = DEFAULT_HORIZON, include_origin_row: bool = False) -> list[str]:
    """Rule-based checks shared by adapters and the synthetic generator. Empty list means valid."""
    problems = []
    if clip.source not in SOURCES and clip.source != SYNTHETIC_SOURCE:
        problems.append(f"unknown source {clip.source!r}")
    a = clip.actions
    if a.ndim != 2 or a.shape[1] != 2:
        problems.append(f"actions must be Hx2, got shape {a.shape}")
        return problems
    if horizon is not None:
        want = horizon + 1 if include_origin_row else horizon
        if a.shape[0] != want:
            problems.append(f"horizon {a.shape[0]} != expected {want}")
    if not np.isfinite(a).all():
        problems.append("non-finite waypoint")
    elif (np.abs(a) >= COORD_BOUND).any():
        problems.append("waypoint outside sanity bound")
    if not clip.history:
        problems.append("empty history")
        return problems
    vals = np.array([s.values() for s in clip.history])
    if not np.isfinite(vals).all():
        problems.append("non-finite history value")
        return problems
    if (np.abs(vals[:, 1:3]) >= COORD_BOUND).any():
        problems.append("history position outside sanity bound")
    t = vals[:, 0]
    if (np.diff(t) <= 0).any():
        problems.append("history not strictly time-ordered")
    if (t > 1e-9).any() or not np.allclose(t / DT, np.round(t / DT), atol=1e-9):
        problems.append("history t_offset must be non-positive multiples of 0.5 s")
    last = clip.history[-1]
    if abs(last.t_offset) > 1e-9 or max(abs(last.position[0]), abs(last.position[1])) > 1e-6:
        problems.append("history must end at t=0 with position (0, 0)")
    return problems


def validate_clip(clip: UnifiedClip, horizon: int | None = DEFAULT_HORIZON, include_origin_row: bool = False) -> None:
    problems = clip_problems(clip, horizon, include_origin_row)
    if problems:
        raise ContractError(f"clip {clip.clip_id}: " + "; ".join(problems))


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------


def save_clip(clip: UnifiedClip, path: str | Path) -> None:
    Path(path).write_text(json.dumps(clip.to_dict(), sort_keys=True), encoding="utf-8")


def load_clip(path: str | Path) -> UnifiedClip:
    return UnifiedClip.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def write_corpus(clips: Iterable[UnifiedClip], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for clip in clips:
            fh.write(json.dumps(clip.to_dict(), sort_keys=True))
            fh.write("\n")
            n += 1
    return n


def read_corpus(path: str | Path) -> list[UnifiedClip]:
    clips = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                clips.append(UnifiedClip.from_dict(json.loads(line)))
    return clips


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryStats:
    mean: np.ndarray
    var: np.ndarray
    count: int
    source_id: str = ""

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "var": self.var.tolist(),
            "count": self.count,
            "source_id": self.source_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryStats":
        return cls(np.asarray(d["mean"], float), np.asarray(d["var"], float), int(d["count"]), d.get("source_id", ""))


def compute_trajectory_stats(clips: Sequence[UnifiedClip], source_id: str = "") -> TrajectoryStats:
    """Per-(step, coordinate) mean and population variance of the future actions."""
    if not clips:
        raise ContractError("compute_trajectory_stats needs at least one clip")
    shape = clips[0].actions.shape
    for c in clips:
        if c.actions.shape != shape:
            raise DimensionError(f"mixed horizons: {c.clip_id} has {c.actions.shape}, expected {shape}")
    stacked = np.stack([c.actions for c in clips])
    mean = stacked.mean(axis=0)
    var = ((stacked - mean) ** 2).mean(axis=0)
    return TrajectoryStats(mean, var, len(clips), source_id)


# ---------------------------------------------------------------------------
# prompt
# ---------------------------------------------------------------------------


def _num(v: float) -> str:
    r = round(float(v), 2)
    return repr(0.0 if r == 0 else r)


def render_prompt(clip: UnifiedClip, dt: float = DT) -> str:
    """Render the chat-style SFT prompt for a clip (images are referenced, never loaded)."""
    horizon = clip.horizon
    span = -clip.history[0].t_offset
    states = ", ".join(
        f"(t-{abs(s.t_offset):.1f}s) [{_num(s.position[0])}, {_num(s.position[1])}], "
        f"Acceleration: X {_num(s.acceleration[0])}, Y {_num(s.acceleration[1])} m/s^2, "
        f"Velocity: X {_num(s.velocity[0])}, Y {_num(s.velocity[1])} m/s"
        for s in clip.history
    )
    future_s = horizon * dt
    future_txt = f"{future_s:g}"
    user = (
        "You are an autonomous driving agent. You have access to multi-view camera images of a vehicle: "
        "(1) front view (which you should focus on with the most attention) <image>, "
        "(2) front right view <image>, and (3) front left view <image>. "
        f"Your task is to do your best to predict future waypoints for the vehicle over the next {horizon} timesteps, "
        "given the vehicle's intent inferred from the images. "
        f"Provided are the previous ego vehicle status recorded over the last {span:.1f} seconds "
        f"(at {dt:g}-second intervals). This includes the x and y coordinates of the ego vehicle. "
        "Positive x means forward direction while positive y means leftwards. "
        f"The data is presented in the format [x, y]:{states}\n\n"
        "Please think deeply. Engage in an internal dialogue other natural language thought expressions "
        "It's a reasoning process. Provide your reasoning between the <think> </think> tags, "
        "and then give your answer between the <answer> </answer> tags. "
        f"Predicted future movement details for the next {future_txt} seconds (sampled at {dt:g}-second intervals), "
        "including BEV location in x and y directions (in meters). "
        "Positive x means forward direction while positive y means leftwards. The output is formatted as [x, y]."
    )
    images = ", ".join(clip.camera_refs or [])
    lines = ["system: You are a helpful assistant"]
    if images:
        lines.append(f"images: {images}")
    lines.append(f"user: {user}")
    return "\n".join(lines)


_INTENT_RE = re.compile(r"Intent:\s*([a-z-]+)")


def reasoning_for(kind: str, speed: float) -> str:
    return f"Intent: {kind}. Current speed {speed:.1f} m/s."


def intent_from_text(text: str | None) -> str | None:
    """Extract the maneuver tag from reasoning text, if it names one."""
    if not text:
        return None
    m = _INTENT_RE.search(text)
    if m and m.group(1) in MANEUVERS:
        return m.group(1)
    return None


# ---------------------------------------------------------------------------
# synthetic scenarios
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Maneuver:
    """Closed-form motion: speed profile plus a constant yaw rate after onset."""

    kind: str
    speed: float
    accel: float = 0.0  # signed longitudinal acceleration after onset
    yaw_rate: float = 0.0
    onset: float = 0.0  # seconds relative to the current frame

    def _ramp_integral(self, t: np.ndarray) -> np.ndarray:
        # integral over (-inf, t] of clip(s - onset, 0, cap)
        r = np.maximum(t - self.onset, 0.0)
        if self.accel < 0:
            cap = self.speed / -self.accel
            return np.where(r <= cap, 0.5 * r * r, 0.5 * cap * cap + cap * (r - cap))
        return 0.5 * r * r

    def speed_at(self, t: np.ndarray) -> np.ndarray:
        r = np.maximum(t - self.onset, 0.0)
        return np.maximum(self.speed + self.accel * r, 0.0)

    def long_accel_at(self, t: np.ndarray) -> np.ndarray:
        active = (t >= self.onset) & (self.speed_at(t) > 0)
        return np.where(active, self.accel, 0.0)

    def arclength(self, t: np.ndarray) -> np.ndarray:
        return self.speed * t + self.accel * (self._ramp_integral(t) - self._ramp_integral(np.zeros(1)))

    def heading(self, t: np.ndarray) -> np.ndarray:
        return self.yaw_rate * (np.maximum(t - self.onset, 0.0) - max(-self.onset, 0.0))

    def states(self, t: np.ndarray):
        """Positions, velocities, accelerations at times ``t`` in the frame at t=0."""
        t = np.asarray(t, dtype=np.float64)
        if self.yaw_rate == 0.0:
            s = self.arclength(t)
            pos = np.stack([s, np.zeros_like(s)], axis=-1)
            psi = np.zeros_like(t)
        else:
            # constant speed arcs: straight before onset, circular after
            w = self.yaw_rate
            tau = np.maximum(t - self.onset, 0.0)
            pre = np.minimum(t - self.onset, 0.0)
            x_w = self.speed * pre + (self.speed / w) * np.sin(w * tau)
            y_w = (self.speed / w) * (1.0 - np.cos(w * tau))
            tau0 = max(-self.onset, 0.0)
            x0 = self.speed * min(-self.onset, 0.0) + (self.speed / w) * math.sin(w * tau0)
            y0 = (self.speed / w) * (1.0 - math.cos(w * tau0))
            psi0 = w * tau0
            c, s_ = math.cos(-psi0), math.sin(-psi0)
            dx, dy = x_w - x0, y_w - y0
            pos = np.stack([c * dx - s_ * dy, s_ * dx + c * dy], axis=-1)
            psi = self.heading(t)
        v = self.speed_at(t)
        a_long = self.long_accel_at(t)
        turning = (t >= self.onset) * self.yaw_rate
        ch, sh = np.cos(psi), np.sin(psi)
        vel = np.stack([v * ch, v * sh], axis=-1)
        acc = np.stack([a_long * ch - v * turning * sh, a_long * sh + v * turning * ch], axis=-1)
        return pos, vel, acc


def clip_from_maneuver(
    m: Maneuver,
    clip_id: str,
    horizon: int = DEFAULT_HORIZON,
    history_len: int = 7,
    dt: float = DT,
) -> UnifiedClip:
    t_hist = dt * np.arange(-(history_len - 1), 1)
    t_fut = dt * np.arange(1, horizon + 1)
    pos, vel, acc = m.states(t_hist)
    pos[-1] = 0.0
    history = [
        EgoState(float(t), (float(p[0]), float(p[1])), (float(v[0]), float(v[1])), (float(a[0]), float(a[1])))
        for t, p, v, a in zip(t_hist, pos, vel, acc)
    ]
    fut, _, _ = m.states(t_fut)
    return UnifiedClip(clip_id, SYNTHETIC_SOURCE, history, fut, reasoning_for(m.kind, m.speed_at(np.zeros(1))[0]))


def sample_maneuver(kind: str, rng: np.random.Generator) -> Maneuver:
    """Draw maneuver parameters that keep steering and acceleration inside the reward limits."""
    if kind == "straight":
        return Maneuver(kind, rng.uniform(3.0, 15.0))
    if kind in ("left-turn", "right-turn"):
        sign = 1.0 if kind == "left-turn" else -1.0
        # |yaw| over the 5 s horizon stays < 0.6 rad, i.e. segment ratios < tan(0.6) < 0.84
        return Maneuver(kind, rng.uniform(3.0, 15.0), yaw_rate=sign * rng.uniform(0.04, 0.12), onset=rng.uniform(-3.0, 0.0))
    if kind == "stop":
        speed, decel, onset = rng.uniform(3.0, 12.0), rng.uniform(1.5, 4.0), rng.uniform(-2.0, 0.0)
        # come to rest by t = 4 s so the last waypoints are stationary (decel stays <= 4 m/s^2)
        decel = max(decel, speed / (4.0 - onset))
        return Maneuver(kind, speed, accel=-decel, onset=onset)
    if kind == "accelerate":
        return Maneuver(kind, rng.uniform(3.0, 12.0), accel=rng.uniform(0.5, 2.0), onset=rng.uniform(-2.0, 0.0))
    raise ContractError(f"unknown maneuver kind {kind!r}; expected one of {MANEUVERS}")


def synth_scenarios(
    count: int,
    kinds: Iterable[str] = MANEUVERS,
    seed: int = 0,
    horizon: int = DEFAULT_HORIZON,
    history_len: int = 7,
) -> list[UnifiedClip]:
    kinds = set(kinds)
    if not kinds:
        raise ContractError("synth_scenarios needs at least one maneuver kind")
    bad = sorted(kinds - set(MANEUVERS))
    if bad:
        raise ContractError(f"unknown maneuver kinds {bad}")
    kinds = sorted(kinds, key=MANEUVERS.index)
    if count < 1:
        raise ContractError("count must be >= 1")
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(count):
        kind = kinds[int(rng.integers(len(kinds)))]
        m = sample_maneuver(kind, rng)
        clips.append(clip_from_maneuver(m, f"synth-{seed}-{i:05d}", horizon, history_len))
    return clips


def split(clips: Sequence, val_fraction: float, seed: int = 0) -> tuple[list, list]:
    """Deterministic shuffled train/validation split."""
    if not 0.0 < val_fraction < 1.0:
        raise ContractError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    if len(clips) < 2:
        raise ContractError("split needs at least two clips")
    n = len(clips)
    n_val = min(max(int(round(n * val_fraction)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = set(perm[:n_val].tolist())
    train = [c for i, c in enumerate(clips) if i not in val_idx]
    val = [c for i, c in enumerate(clips) if i in val_idx]
    return train, val
