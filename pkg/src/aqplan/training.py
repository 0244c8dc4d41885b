"""Supervised trajectory regression followed by GRPO fine-tuning.

The RL stage treats the planner as a diagonal-Gaussian policy around its
mean trajectory. Each clip gets ``group_size`` sampled trajectories scored by
``r_total``; advantages are group-normalised rewards and the objective is
``mean(A * log pi) - kl_beta * KL(pi || pi_ref)`` with the KL in closed form.
There is no ratio clipping and each sample group is used for one update.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .data import UnifiedClip, compute_trajectory_stats
from .decoder import gaussian_kl, gaussian_log_density, policy_sample
from .errors import ContractError, NumericAbort
from .evaluation import mean_l2
from .model import ModelConfig, Planner, substream
from .numerics import AdamW, Tensor
from .rewards import RewardConfig, r_total, r_total_many

log = logging.getLogger(__name__)


@dataclass
class SFTConfig:
    lr: float = 5e-5
    epochs: int = 4
    batch: int = 8
    grad_accum: int = 2
    loss: str = "smooth_l1"
    weight_decay: float = 0.0
    max_grad_norm: float = 5.0
    lr_schedule: str = "constant"


@dataclass
class RLConfig:
    lr: float = 1e-6
    epochs: int = 1
    batch: int = 8
    grad_accum: int = 2
    group_size: int = 8
    kl_beta: float = 0.04
    max_grad_norm: float = 5.0
    lr_schedule: str = "cosine"
    weight_decay: float = 0.01


@dataclass
class TrainConfig:
    sft: SFTConfig = field(default_factory=SFTConfig)
    rl: RLConfig = field(default_factory=RLConfig)
    seed: int = 0
    val_fraction: float = 0.1

    def problems(self, prefix: str = "train") -> list[str]:
        errs = []
        for stage in ("sft", "rl"):
            c = getattr(self, stage)
            p = f"{prefix}.{stage}"
            if c.lr <= 0:
                errs.append(f"{p}.lr: must be > 0")
            if c.epochs < 0:
                errs.append(f"{p}.epochs: must be >= 0")
            if c.batch < 1:
                errs.append(f"{p}.batch: must be >= 1")
            if c.grad_accum < 1:
                errs.append(f"{p}.grad_accum: must be >= 1")
            if c.lr_schedule not in ("constant", "cosine"):
                errs.append(f"{p}.lr_schedule: must be 'constant' or 'cosine'")
            if c.max_grad_norm < 0:
                errs.append(f"{p}.max_grad_norm: must be >= 0")
        if self.sft.loss not in ("mse", "smooth_l1"):
            errs.append(f"{prefix}.sft.loss: must be 'mse' or 'smooth_l1'")
        if self.rl.group_size < 2:
            errs.append(f"{prefix}.rl.group_size: must be >= 2")
        if self.rl.kl_beta < 0:
            errs.append(f"{prefix}.rl.kl_beta: must be >= 0")
        if not 0 < self.val_fraction < 1:
            errs.append(f"{prefix}.val_fraction: must lie in (0, 1)")
        return errs


def scheduled_lr(base: float, schedule: str, step: int, total: int) -> float:
    if schedule == "cosine" and total > 1:
        return base * 0.5 * (1.0 + math.cos(math.pi * step / total))
    return base


def _targets(clips: Sequence[UnifiedClip]) -> np.ndarray:
    return np.stack([c.actions for c in clips])


def regression_loss(pred: Tensor, target: np.ndarray, kind: str = "smooth_l1") -> Tensor:
    """Mean per-coordinate loss; smooth_l1 is the Huber loss with threshold 1 m."""
    d = pred - Tensor(target)
    if kind == "mse":
        return (d * d).mean()
    if kind == "smooth_l1":
        c = nx.clamp(d, -1.0, 1.0)
        return (0.5 * c * c + (d - c) * Tensor(np.sign(d.data))).mean()
    raise ContractError(f"unknown regression loss {kind!r}")


def sft_loss(model: Planner, clips: Sequence[UnifiedClip], kind: str = "smooth_l1") -> Tensor:
    return regression_loss(model(list(clips)), _targets(clips), kind)


def sft_step(
    batch: Sequence[UnifiedClip],
    model: Planner,
    optimizer: AdamW,
    cfg: SFTConfig,
    lr: float | None = None,
    batch_id: int | str = "?",
) -> float:
    """Accumulate gradients over ``grad_accum`` micro-batches, then apply one update.

    Returns the batch loss before the update.
    """
    if not batch:
        raise ContractError("empty SFT batch")
    micro = [m for m in np.array_split(np.arange(len(batch)), min(cfg.grad_accum, len(batch))) if len(m)]
    model.zero_grad()
    total = 0.0
    try:
        for idx in micro:
            clips = [batch[i] for i in idx]
            loss = sft_loss(model, clips, cfg.loss)
            weight = len(idx) / len(batch)
            nx.backward(loss * weight)
            total += weight * loss.item()
    except NumericAbort as exc:
        raise NumericAbort(f"SFT batch {batch_id}: {exc}") from exc
    if not math.isfinite(total):
        raise NumericAbort(f"SFT batch {batch_id}: non-finite loss")
    if cfg.max_grad_norm > 0:
        nx.clip_grad_norm(model.parameters(), cfg.max_grad_norm)
    optimizer.step(lr)
    model.zero_grad()
    return total


# ---------------------------------------------------------------------------
# GRPO
# ---------------------------------------------------------------------------


def grpo_advantages(rewards) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ContractError("group advantages need at least two rewards")
    d = r - r.mean()
    # second centring pass removes the rounding left by the mean; equal rewards give exact zeros
    d -= d.mean()
    return d / (np.sqrt(np.mean(d * d)) + 1e-8)


@dataclass
class GroupBatch:
    clips: list[UnifiedClip]
    samples: np.ndarray  # (B, G, H, N)
    logp_old: np.ndarray  # (B, G)
    logp_ref: np.ndarray  # (B, G)
    rewards: np.ndarray  # (B, G)

    def __post_init__(self):
        b, g = self.rewards.shape
        if len(self.clips) != b or self.samples.shape[:2] != (b, g) or self.logp_old.shape != (b, g):
            raise ContractError("GroupBatch arrays disagree on (batch, group) sizes")
        if not np.isfinite(self.rewards).all():
            raise NumericAbort("non-finite reward in group batch")

    @property
    def advantages(self) -> np.ndarray:
        return np.stack([grpo_advantages(r) for r in self.rewards])


def _policy_logp(model: Planner, clips, samples: np.ndarray) -> np.ndarray:
    with nx.no_grad():
        mean = model(clips)
        return gaussian_log_density(samples, mean.reshape((mean.shape[0], 1) + mean.shape[1:]), model.policy_log_std()).data


def sample_groups(
    clips: Sequence[UnifiedClip],
    model: Planner,
    ref_model: Planner,
    group_size: int,
    reward_cfg: RewardConfig,
    rng: np.random.Generator,
) -> GroupBatch:
    clips = list(clips)
    with nx.no_grad():
        means = model(clips).data
        log_std = model.policy_log_std().data
    samples, logp = [], []
    for m in means:
        s, lp = policy_sample(m, log_std, group_size, rng)
        samples.append(s)
        logp.append(lp)
    samples = np.stack(samples)
    rewards = np.stack([r_total_many(s, c.actions, reward_cfg) for s, c in zip(samples, clips)])
    logp_ref = _policy_logp(ref_model, clips, samples)
    return GroupBatch(clips, samples, np.stack(logp), logp_ref, rewards)


def grpo_step(
    batch: GroupBatch,
    model: Planner,
    ref_model: Planner,
    optimizer: AdamW,
    cfg: RLConfig,
    lr: float | None = None,
) -> dict[str, float]:
    adv = batch.advantages
    model.zero_grad()
    mean = model(batch.clips)
    b = mean.shape[0]
    log_std = model.policy_log_std()
    logp = gaussian_log_density(batch.samples, mean.reshape((b, 1) + mean.shape[1:]), log_std)
    pg = -(Tensor(adv) * logp).mean()
    with nx.no_grad():
        ref_mean = ref_model(batch.clips).data
        ref_log_std = ref_model.policy_log_std().data
    kl = gaussian_kl(mean, log_std, ref_mean, ref_log_std).mean()
    if not math.isfinite(kl.item()):
        raise NumericAbort("non-finite KL")
    loss = pg + cfg.kl_beta * kl if cfg.kl_beta > 0 else pg
    nx.backward(loss)
    norm = nx.clip_grad_norm(model.parameters(), cfg.max_grad_norm) if cfg.max_grad_norm > 0 else float(
        math.sqrt(sum(float((p.grad**2).sum()) for p in model.parameters() if p.grad is not None))
    )
    optimizer.step(lr)
    model.zero_grad()
    return {
        "mean_reward": float(batch.rewards.mean()),
        "mean_advantage": float(adv.mean()),
        "kl": kl.item(),
        "grad_norm": norm,
        "loss": loss.item(),
    }


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


def evaluate_clips(model: Planner, clips: Sequence[UnifiedClip], reward_cfg: RewardConfig) -> dict[str, float]:
    preds = model.predict(list(clips))
    gts = _targets(clips)
    l2 = mean_l2(preds, gts, reward_cfg.dt)
    return {
        "val_avg_l2": l2["avg"],
        "val_l2_1s": l2["L2@1s"],
        "val_l2_2s": l2["L2@2s"],
        "val_l2_3s": l2["L2@3s"],
        "val_r_total": float(np.mean([r_total(p, g, reward_cfg) for p, g in zip(preds, gts)])),
    }


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


@dataclass
class TrainResult:
    model: Planner
    post_sft: dict[str, np.ndarray]
    post_rl: dict[str, np.ndarray]
    metrics: list[dict]
    summary: dict


def run_sft(model: Planner, train: Sequence[UnifiedClip], val: Sequence[UnifiedClip], cfg: TrainConfig,
            reward_cfg: RewardConfig, metrics: list[dict], log_fn: Callable[[dict], None] | None = None) -> None:
    sc = cfg.sft
    opt = AdamW(model.named_parameters(), sc.lr, weight_decay=sc.weight_decay)
    rng = substream(cfg.seed, "data.sft")
    per_step = sc.batch * sc.grad_accum
    plan = [_batches(len(train), per_step, rng) for _ in range(sc.epochs)]
    total = sum(len(p) for p in plan)
    step = 0
    for epoch, batches in enumerate(plan, 1):
        for bi, idx in enumerate(batches):
            lr = scheduled_lr(sc.lr, sc.lr_schedule, step, total)
            loss = sft_step([train[i] for i in idx], model, opt, sc, lr, batch_id=f"{epoch}:{bi}")
            rec = {"stage": "sft", "step": step, "epoch": epoch, "loss": loss, "lr": lr}
            if bi == len(batches) - 1 and val:
                rec.update(evaluate_clips(model, val, reward_cfg))
            metrics.append(rec)
            if log_fn:
                log_fn(rec)
            step += 1


def run_rl(model: Planner, ref_model: Planner, train: Sequence[UnifiedClip], val: Sequence[UnifiedClip],
           cfg: TrainConfig, reward_cfg: RewardConfig, metrics: list[dict],
           log_fn: Callable[[dict], None] | None = None) -> None:
    rc = cfg.rl
    opt = AdamW(model.named_parameters(), rc.lr, weight_decay=rc.weight_decay)
    rng = substream(cfg.seed, "data.rl")
    prng = substream(cfg.seed, "policy")
    per_step = rc.batch * rc.grad_accum
    plan = [_batches(len(train), per_step, rng) for _ in range(rc.epochs)]
    total = sum(len(p) for p in plan)
    step = 0
    for epoch, batches in enumerate(plan, 1):
        for bi, idx in enumerate(batches):
            lr = scheduled_lr(rc.lr, rc.lr_schedule, step, total)
            group = sample_groups([train[i] for i in idx], model, ref_model, rc.group_size, reward_cfg, prng)
            stats = grpo_step(group, model, ref_model, opt, rc, lr)
            rec = {"stage": "rl", "step": step, "epoch": epoch, "lr": lr, **stats}
            if bi == len(batches) - 1 and val:
                rec.update(evaluate_clips(model, val, reward_cfg))
            metrics.append(rec)
            if log_fn:
                log_fn(rec)
            step += 1


def frozen_copy(model: Planner) -> Planner:
    ref = copy.deepcopy(model)
    for p in ref.parameters():
        p.requires_grad = False
    return ref


def train_pipeline(
    train: Sequence[UnifiedClip],
    val: Sequence[UnifiedClip],
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    reward_cfg: RewardConfig | None = None,
    stages: str = "both",
    model: Planner | None = None,
    log_fn: Callable[[dict], None] | None = None,
) -> TrainResult:
    """SFT then GRPO; pass ``model`` to resume from an existing (post-SFT) planner."""
    errs = cfg.problems()
    if errs:
        raise ContractError("; ".join(errs))
    if stages not in ("sft", "rl", "both"):
        raise ContractError(f"unknown stage {stages!r}")
    model_cfg = model_cfg or ModelConfig()
    reward_cfg = reward_cfg or RewardConfig()
    if model is None:
        stats = compute_trajectory_stats(list(train), source_id="train")
        model = Planner(model_cfg, stats, seed=cfg.seed)
    metrics: list[dict] = []
    summary: dict = {"initial": evaluate_clips(model, val, reward_cfg) if val else {}}
    if stages in ("sft", "both"):
        run_sft(model, train, val, cfg, reward_cfg, metrics, log_fn)
    post_sft = model.state_dict()
    summary["post_sft"] = evaluate_clips(model, val, reward_cfg) if val else {}
    if stages in ("rl", "both") and cfg.rl.epochs > 0:
        ref = frozen_copy(model)
        run_rl(model, ref, train, val, cfg, reward_cfg, metrics, log_fn)
        summary["post_rl"] = evaluate_clips(model, val, reward_cfg) if val else {}
    else:
        summary["post_rl"] = summary["post_sft"]
    post_rl = model.state_dict()
    summary["steps"] = len(metrics)
    return TrainResult(model, post_sft, post_rl, metrics, summary)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
