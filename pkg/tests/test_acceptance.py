"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The desk-scale criteria share one `train --stage both` run of configs/desk.json
(2000 synthetic clips, default model sizes). Expect roughly ten minutes on a
single core.
"""

import json
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from acceptance_log import record
from reward_oracle import random_case, ref_acc, ref_acc_seq, ref_steer, ref_total, ref_traj

from aqplan import numerics as nx
from aqplan.checkpoint import load_planner
from aqplan.cli import corpus_split, main
from aqplan.config import load_run_config
from aqplan.data import TrajectoryStats, compute_trajectory_stats, synth_scenarios
from aqplan.decoder import AutoregressiveBaseline, init_action_queries
from aqplan.evaluation import (
    ObstacleBox,
    PlannerPolicy,
    RolloutTrace,
    ZeroMotionPolicy,
    closed_loop_rollout,
    collision_rate,
    l2_at_horizons,
    make_scenario,
    run_scenarios,
    scenario_suite,
    score_scenarios,
)
from aqplan.model import ModelConfig, Planner
from aqplan.numerics import grad_check
from aqplan.rewards import RewardConfig, acc_seq, r_acc, r_steer, r_total, r_traj
from aqplan.training import sft_loss, train_pipeline

ROOT = Path(__file__).resolve().parents[1]
DESK = ROOT / "configs" / "desk.json"


def _train(out: Path) -> float:
    t0 = time.perf_counter()
    code = main(["train", "--config", str(DESK), "--output-dir", str(out), "--stage", "both"])
    assert code == 0, f"train exited with {code}"
    return time.perf_counter() - t0


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_a")
    seconds = _train(out)
    return {"dir": out, "seconds": seconds, "summary": json.loads((out / "summary_both.json").read_text())}


# 1 ---------------------------------------------------------------------------


def test_criterion_01_end_to_end_gradient():
    clips = synth_scenarios(50, seed=0)
    model = Planner(ModelConfig(), compute_trajectory_stats(clips), seed=0)
    batch = clips[:2]
    t0 = time.perf_counter()
    worst, checked = 0.0, 0
    for name, p in model.named_parameters().items():
        if name == "log_std":  # policy spread does not enter the regression loss
            continue
        # relative error |a - n| / max(|a|, |n|, 1e-6); entries per tensor sampled with a fixed seed
        err = grad_check(lambda _: sft_loss(model, batch), p, eps=1e-4, max_entries=6, seed=1, floor=1e-6)
        worst = max(worst, err)
        checked += 1
    seconds = time.perf_counter() - t0
    ok = worst < 1e-4 and seconds < 60.0
    record(1, "end-to-end gradient check", ok,
           f"max rel err {worst:.2e} over {checked} parameter tensors (< 1e-4), {seconds:.1f}s (< 60s)")
    assert ok


# 2 ---------------------------------------------------------------------------


def test_criterion_02_reward_oracle():
    rng = np.random.default_rng(20240)
    worst = 0.0
    mismatched = 0
    for _ in range(1000):
        pred, gt, cfg = random_case(rng)
        p, g = pred.tolist(), gt.tolist()
        worst = max(
            worst,
            abs(r_traj(pred, gt, cfg) - ref_traj(p, g, cfg)),
            float(np.max(np.abs(acc_seq(pred, cfg) - np.array(ref_acc_seq(p, cfg))))),
            abs(r_total(pred, gt, cfg) - ref_total(p, g, cfg)),
        )
        mismatched += r_steer(pred, cfg) != ref_steer(p, cfg)
        mismatched += r_acc(pred, cfg) != ref_acc(p, cfg)
    cfg = RewardConfig()
    boundary_steer = r_steer(np.array([[0.0, 0.0], [1.0, 0.84]]), cfg)
    boundary_acc = r_acc(np.array([[0.0, 0.0], [1.0, 0.0], [3.5, 0.0]]), cfg)
    ok = worst <= 1e-12 and mismatched == 0 and boundary_steer == 0.0 and boundary_acc == 0.0
    record(2, "reward oracle equivalence", ok,
           f"max |diff| {worst:.1e} on 1000 trajectories, {mismatched} indicator mismatches, "
           f"ratio 0.84 -> {boundary_steer}, |acc| 6.0 -> {boundary_acc}")
    assert ok


# 3 ---------------------------------------------------------------------------


def test_criterion_03_worked_rewards():
    traj = r_traj(np.array([[0.1, 0.0], [0.0, 0.2]]), np.zeros((2, 2)), RewardConfig(gamma=1.0))
    steer = r_steer(np.array([[0.0, 0.0], [2.0, 1.0], [3.0, 2.0]]), RewardConfig())
    acc = float(acc_seq(np.array([[0.0, 0.0], [0.5, 0.0], [4.0, 0.0]]), RewardConfig(dt=0.5))[0])
    score = score_scenarios({"frontal": [
        RolloutTrace("frontal", reference_speed=10.0),
        RolloutTrace("frontal", collided=True, impact_speed=5.0, reference_speed=10.0),
    ]})["score@frontal"]
    ok = (traj, steer, acc, score) == (0.975, 0.5, 12.0, 3.75)
    record(3, "worked reward values", ok, f"r_traj {traj!r}, r_steer {steer!r}, acc {acc!r}, score {score!r}")
    assert ok


# 4 ---------------------------------------------------------------------------


def test_criterion_04_query_init_statistics():
    clips = synth_scenarios(2000, seed=0)
    stats = compute_trajectory_stats(clips)
    bank = init_action_queries(stats, 4096, seed=0, var_floor=1e-6)
    mean = stats.mean.reshape(-1)
    var = np.maximum(stats.var.reshape(-1), 1e-6)
    within = np.abs(bank.queries.mean(axis=1) - mean) <= 3.0 * np.sqrt(var / 4096)
    degenerate = TrajectoryStats(stats.mean, np.zeros_like(stats.var), 1)
    flat = init_action_queries(degenerate, 4096, seed=0, var_floor=1e-12).queries
    spread = float(np.ptp(flat, axis=1).max())
    ok = within.mean() >= 0.99 and spread < 1e-4
    record(4, "query initialisation statistics", ok,
           f"{within.mean():.1%} of rows within 3 sqrt(var/D) (>= 99%), "
           f"degenerate rows constant to {spread:.1e}")
    assert ok


# 5 ---------------------------------------------------------------------------


def test_criterion_05_single_pass_vs_autoregressive():
    clips = synth_scenarios(100, seed=5)
    model = Planner(ModelConfig(), compute_trajectory_stats(clips), seed=0)
    before = model.decode_count
    model.predict(clips)
    parallel_calls = model.decode_count - before

    with nx.no_grad():
        hidden = model.encode(clips)
    baseline = AutoregressiveBaseline(model.decoder)
    ratios = []
    for _ in range(3):
        t0 = time.perf_counter()
        with nx.no_grad():
            model.decoder.decode(model.queries, hidden)
        t_par = time.perf_counter() - t0
        t0 = time.perf_counter()
        baseline.decode(model.queries, hidden)
        t_ar = time.perf_counter() - t0
        ratios.append(t_ar / t_par)
    per_clip = baseline.counter.value / (3 * len(clips))
    speedup = statistics.median(ratios)
    ok = parallel_calls == 100 and per_clip >= 20 and speedup >= 5.0
    record(5, "single-pass decoding vs token-by-token", ok,
           f"counter +{parallel_calls} for 100 clips, baseline {per_clip:g} calls/clip, "
           f"median wall-clock ratio {speedup:.1f}x (runs {', '.join(f'{r:.1f}' for r in ratios)})")
    assert ok


# 6 ---------------------------------------------------------------------------


def test_criterion_06_sft_efficacy(desk_run):
    s = desk_run["summary"]
    before, after = s["initial"]["val_avg_l2"], s["post_sft"]["val_avg_l2"]
    frac = after / before
    ok = frac < 0.2 and desk_run["seconds"] < 600
    record(6, "SFT efficacy", ok,
           f"val avg L2 {before:.3f} -> {after:.3f} m ({frac:.1%} of untrained, < 20%); "
           f"full SFT+RL run {desk_run['seconds']:.0f}s on this machine (< 600s)")
    assert ok


# 7 ---------------------------------------------------------------------------


def test_criterion_07_grpo_efficacy(desk_run):
    cfg = load_run_config(DESK, [f"output_dir={json.dumps(str(desk_run['dir']))}"])
    train, val = corpus_split(cfg)
    base = desk_run["summary"]["post_sft"]["val_r_total"]
    deltas = []
    for seed in range(5):
        model, _ = load_planner(desk_run["dir"] / "post_sft.ckpt")
        cfg.train.seed = seed
        res = train_pipeline(train, val, cfg.train, cfg.model, cfg.reward, stages="rl", model=model)
        if seed == cfg.seed:
            # the CLI run used the same seed, so the result must match it
            assert res.summary["post_rl"] == desk_run["summary"]["post_rl"]
        deltas.append(res.summary["post_rl"]["val_r_total"] - base)
    improved = sum(d > 0 for d in deltas)
    ok = all(d >= 0 for d in deltas) and improved >= 4
    record(7, "GRPO efficacy", ok,
           f"post-SFT val r_total {base:.5f}; change after 1 RL epoch per seed "
           f"[{', '.join(f'{d:+.5f}' for d in deltas)}], {improved}/5 strictly higher")
    assert ok


# 8 ---------------------------------------------------------------------------


def test_criterion_08_metrics():
    l2 = l2_at_horizons(np.tile([0.3, 0.4], (10, 1)), np.zeros((10, 2)))
    l2_ok = l2 == {"L2@1s": 0.5, "L2@2s": 0.5, "L2@3s": 0.5, "avg": 0.5}

    path = np.column_stack([2.5 * np.arange(1, 11), np.zeros(10)])
    far = np.tile([0.0, 50.0], (10, 1))
    crossing = far.copy()
    crossing[2] = path[2]  # t = 1.5 s
    cr = collision_rate([path] * 4, [[ObstacleBox(far)]] * 3 + [[ObstacleBox(crossing)]])
    cr_ok = cr["CR@1s"] == 0.0 and cr["CR@2s"] == 25.0

    rng = np.random.default_rng(8)
    monotone = 0
    for _ in range(100):
        pred = np.cumsum(rng.normal([2.5, 0.0], [1.5, 1.0], (10, 2)), axis=0)
        boxes = [ObstacleBox(np.cumsum(rng.normal(0, 1, (10, 2)), axis=0) + rng.uniform(-5, 25, 2),
                             tuple(rng.uniform(0.5, 3, 2))) for _ in range(rng.integers(1, 4))]
        r = collision_rate([pred], [boxes])
        monotone += r["CR@1s"] <= r["CR@2s"] <= r["CR@3s"]
    ok = l2_ok and cr_ok and monotone == 100
    record(8, "metric correctness", ok,
           f"3-4-5 offset -> {l2['avg']}, hand scene CR@1s {cr['CR@1s']:g}% / CR@2s {cr['CR@2s']:g}%, "
           f"monotone on {monotone}/100 random scenes")
    assert ok


# 9 ---------------------------------------------------------------------------


def test_criterion_09_closed_loop(desk_run):
    frontal = make_scenario("frontal", ego_speed=0.0, gap=10.0, adversary_speed=5.0)
    tr = closed_loop_rollout(ZeroMotionPolicy(), frontal)
    impact_ok = tr.collided and abs(tr.collision_time - 2.0) <= 0.5 and abs(tr.impact_speed - 5.0) <= 0.01

    cfg = load_run_config(DESK)
    suite = scenario_suite(cfg.eval.n_per_kind, cfg.eval.scenario_seed)
    model, _ = load_planner(desk_run["dir"] / "post_sft.ckpt")
    planner = score_scenarios(run_scenarios(PlannerPolicy(model), suite, cfg.eval.replan_hz))
    zero = score_scenarios(run_scenarios(ZeroMotionPolicy(), suite, cfg.eval.replan_hz))
    kinds = ("stationary", "frontal", "side")
    per_kind = ", ".join(f"{k} {planner['score@' + k]:.2f} vs {zero['score@' + k]:.2f}" for k in kinds)
    ok = impact_ok and planner["score@avg"] > zero["score@avg"]
    record(9, "closed-loop harness", ok,
           f"zero-motion frontal hit at t={tr.collision_time}s, impact {tr.impact_speed:.3f} m/s; "
           f"mean score over kinds post-SFT {planner['score@avg']:.3f} vs zero-motion {zero['score@avg']:.3f} "
           f"({per_kind})")
    assert ok


# 10 --------------------------------------------------------------------------


def test_criterion_10_reproducibility(desk_run, tmp_path_factory):
    other = tmp_path_factory.mktemp("desk_b")
    _train(other)
    names = ("metrics.jsonl", "post_sft.ckpt", "post_rl.ckpt", "summary_both.json")
    same = {n: (desk_run["dir"] / n).read_bytes() == (other / n).read_bytes() for n in names}
    ok = all(same.values())
    record(10, "bitwise reproducibility", ok,
           ", ".join(f"{n} {'identical' if v else 'DIFFERS'}" for n, v in same.items()))
    assert ok
