"""SVG figures: training curves, open-loop trajectories, closed-loop rollouts."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # stable SVG output across runs
    plt.rcParams["svg.hashsalt"] = "aqplan"
    plt.rcParams["svg.fonttype"] = "none"
    return plt


def _save(fig, path: str | Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})


def plot_training_curves(records: Sequence[dict], path: str | Path) -> None:
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for stage, color in (("sft", "tab:blue"), ("rl", "tab:orange")):
        rows = [r for r in records if r.get("stage") == stage]
        if not rows:
            continue
        key = "loss" if stage == "sft" else "mean_reward"
        axes[0 if stage == "sft" else 1].plot([r["step"] for r in rows], [r[key] for r in rows], color=color, lw=1)
        val = [r for r in rows if "val_avg_l2" in r]
        if val and stage == "sft":
            ax2 = axes[0].twinx()
            ax2.plot([r["step"] for r in val], [r["val_avg_l2"] for r in val], "o--", color="tab:green")
            ax2.set_ylabel("val avg L2 (m)")
    axes[0].set_title("SFT loss")
    axes[0].set_xlabel("step")
    axes[1].set_title("RL mean group reward")
    axes[1].set_xlabel("step")
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def _draw_box(ax, center, half, **kw):
    from matplotlib.patches import Rectangle

    ax.add_patch(Rectangle((center[1] - half[1], center[0] - half[0]), 2 * half[1], 2 * half[0], **kw))


def plot_trajectories(
    preds: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    scenes: Sequence[Sequence] | None,
    path: str | Path,
    titles: Sequence[str] | None = None,
) -> None:
    """BEV panels: +x drawn upward, +y (left) drawn to the left."""
    plt = _pyplot()
    n = len(preds)
    fig, axes = plt.subplots(1, max(n, 1), figsize=(3.2 * max(n, 1), 5), squeeze=False)
    for k in range(n):
        ax = axes[0, k]
        gt, pred = np.asarray(gts[k]), np.asarray(preds[k])
        ax.plot(gt[:, 1], gt[:, 0], "o-", color="k", ms=3, label="logged")
        ax.plot(pred[:, 1], pred[:, 0], "s-", color="tab:red", ms=3, label="planned")
        for b in (scenes[k] if scenes else []):
            _draw_box(ax, b.centers[-1], b.half_extents, fill=False, ec="tab:gray", lw=0.8)
        ax.invert_xaxis()
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_xlabel("y (m)")
        if titles:
            ax.set_title(titles[k], fontsize=8)
    axes[0, 0].set_ylabel("x (m)")
    axes[0, 0].legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def plot_rollouts(traces: Sequence, scenarios: Sequence, path: str | Path) -> None:
    plt = _pyplot()
    n = len(traces)
    fig, axes = plt.subplots(1, max(n, 1), figsize=(3.2 * max(n, 1), 4), squeeze=False)
    for k, (tr, sc) in enumerate(zip(traces, scenarios)):
        ax = axes[0, k]
        ego = np.array([p[:2] for p in tr.ego_poses])
        adv = np.array(tr.adversary_poses)
        ax.plot(ego[:, 0], ego[:, 1], color="tab:blue", label="ego")
        ax.plot(adv[:, 0], adv[:, 1], color="tab:red", label="adversary")
        _draw_box(ax, adv[-1][::-1], sc.adversary.half_extents[::-1], fill=False, ec="tab:red", lw=0.8)
        state = f"hit @ {tr.collision_time:g}s" if tr.collided else "clean"
        ax.set_title(f"{tr.kind}: {state}", fontsize=8)
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_xlabel("x (m)")
    axes[0, 0].set_ylabel("y (m)")
    axes[0, 0].legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)
