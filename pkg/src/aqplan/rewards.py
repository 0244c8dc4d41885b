"""Rule-based verifiable trajectory rewards.

Conventions: trajectories are (H, 2) arrays of (x forward, y left) waypoints
sampled every ``dt`` seconds; the discount exponent of the trajectory term
starts at 1 for the first waypoint.

The steering limit is the printed ratio 0.84 rather than tan(40 deg) ~ 0.8391.
Zero-length steps (|dx| and |dy| < 1e-9) count as compliant; a pure lateral
step (|dx| < 1e-9 but |dy| >= 1e-9) does not.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError

_TINY = 1e-9


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.95
    theta1: float = 0.8
    theta2: float = 0.1
    theta3: float = 0.1
    steer_ratio_limit: float = 0.84
    acc_limit: float = 6.0
    dt: float = 0.5
    clip_traj: bool = False
    traj_reward_offset: float = 1.0

    def __post_init__(self):
        errs = self.problems()
        if errs:
            raise ContractError("; ".join(errs))

    def problems(self, prefix: str = "reward") -> list[str]:
        errs = []
        if not 0.0 < self.gamma <= 1.0:
            errs.append(f"{prefix}.gamma: must lie in (0, 1]")
        if self.alpha < 0 or self.beta < 0:
            errs.append(f"{prefix}.alpha/beta: must be >= 0")
        thetas = (self.theta1, self.theta2, self.theta3)
        if any(t < 0 for t in thetas):
            errs.append(f"{prefix}.theta: weights must be >= 0")
        elif sum(thetas) <= 0:
            errs.append(f"{prefix}.theta: weights must sum to a positive number")
        if self.steer_ratio_limit <= 0:
            errs.append(f"{prefix}.steer_ratio_limit: must be > 0")
        if self.acc_limit <= 0:
            errs.append(f"{prefix}.acc_limit: must be > 0")
        if self.dt <= 0:
            errs.append(f"{prefix}.dt: must be > 0")
        return errs

    def to_dict(self) -> dict:
        return asdict(self)


def _traj(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 2:
        raise ContractError(f"{name} must be an (H, 2) trajectory, got shape {a.shape}")
    return a


def traj_cost(pred, gt, cfg: RewardConfig) -> float:
    """(1/H) * sum_i gamma^i (alpha dx_i^2 + beta dy_i^2), i = 1..H."""
    pred, gt = _traj(pred, "pred"), _traj(gt, "gt")
    if pred.shape != gt.shape:
        raise ContractError(f"pred {pred.shape} and gt {gt.shape} differ")
    if pred.shape[0] < 1:
        raise ContractError("trajectory needs at least one waypoint")
    d = pred - gt
    w = cfg.gamma ** np.arange(1, pred.shape[0] + 1)
    return float(np.mean(w * (cfg.alpha * d[:, 0] ** 2 + cfg.beta * d[:, 1] ** 2)))


def r_traj(pred, gt, cfg: RewardConfig) -> float:
    cost = traj_cost(pred, gt, cfg)
    if cfg.clip_traj:
        cost = min(1.0, cost)
    return cfg.traj_reward_offset - cost


def r_steer(pred, cfg: RewardConfig) -> float:
    """Fraction of consecutive steps whose |dy/dx| stays below the steering ratio limit."""
    pred = _traj(pred, "pred")
    if pred.shape[0] < 2:
        raise ContractError("steering reward needs at least two waypoints")
    d = np.diff(pred, axis=0)
    dx, dy = np.abs(d[:, 0]), np.abs(d[:, 1])
    degenerate = dx < _TINY
    ratio = np.divide(dy, dx, out=np.zeros_like(dy), where=~degenerate)
    ok = np.where(degenerate, dy < _TINY, ratio < cfg.steer_ratio_limit)
    return float(ok.mean())


def acc_seq(pred, cfg: RewardConfig) -> np.ndarray:
    """Successive step-length differences over dt^2 (H - 2 values, m/s^2)."""
    pred = _traj(pred, "pred")
    if pred.shape[0] < 3:
        raise ContractError("acceleration needs at least three waypoints")
    lengths = np.hypot(*np.diff(pred, axis=0).T)
    return np.diff(lengths) / cfg.dt**2


def r_acc(pred, cfg: RewardConfig) -> float:
    return float((np.abs(acc_seq(pred, cfg)) < cfg.acc_limit).mean())


def r_total(pred, gt, cfg: RewardConfig) -> float:
    return cfg.theta1 * r_traj(pred, gt, cfg) + cfg.theta2 * r_steer(pred, cfg) + cfg.theta3 * r_acc(pred, cfg)


def r_total_many(preds: np.ndarray, gt: np.ndarray, cfg: RewardConfig) -> np.ndarray:
    """r_total for a stack of predictions (G, H, 2) against one ground truth."""
    return np.array([r_total(p, gt, cfg) for p in preds])
