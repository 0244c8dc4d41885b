"""Command-line entry point: ingest, stats, gen-synth, train, eval, plot.

Exit codes: 0 ok, 2 input error, 3 ordering or contract error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .adapters import ingest_many
from .checkpoint import load_planner, save_planner
from .config import ConfigError, RunConfig, load_run_config
from .data import MANEUVERS, SOURCES, compute_trajectory_stats, read_corpus, split, synth_scenarios, write_corpus
from .errors import ContractError, NumericAbort, OrderingError
from .evaluation import (
    ConstantVelocityPolicy,
    PlannerPolicy,
    ZeroMotionPolicy,
    collision_rate,
    lane_traffic_scene,
    mean_l2,
    run_scenarios,
    scenario_suite,
    score_scenarios,
)
from .model import Planner, substream_seed
from .training import train_pipeline

log = logging.getLogger("aqplan")

EXIT_OK, EXIT_INPUT, EXIT_CONTRACT, EXIT_NUMERIC = 0, 2, 3, 4


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(rows: list[dict], path: Path) -> None:
    fields = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "output_dir", None):
        overrides.append(f"output_dir={json.dumps(args.output_dir)}")
    if getattr(args, "threads", None):
        overrides.append(f"threads={args.threads}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "corpus", None):
        overrides.append(f"data.corpus={json.dumps(args.corpus)}")
    return load_run_config(args.config, overrides)


def _corpus(cfg: RunConfig):
    if cfg.data.corpus:
        clips = read_corpus(cfg.data.corpus)
        if len(clips) < 2:
            raise ContractError(f"{cfg.data.corpus}: need at least two clips to train")
        return clips
    return synth_scenarios(cfg.data.synth_count, seed=cfg.data.synth_seed, horizon=cfg.model.horizon)


def corpus_split(cfg: RunConfig):
    """Train/validation split of the configured corpus, seeded from the run seed."""
    return split(_corpus(cfg), cfg.data.val_fraction, substream_seed(cfg.seed, "data.split"))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    inputs = args.input
    clips = ingest_many([(args.source, p) for p in inputs], args.horizon, args.include_origin_row, args.threads)
    if not clips:
        print(f"error: no valid clips in {', '.join(inputs)}", file=sys.stderr)
        return EXIT_INPUT
    n = write_corpus(clips, args.output)
    print(f"wrote {n} clips to {args.output}")
    return EXIT_OK


def cmd_gen_synth(args) -> int:
    clips = synth_scenarios(args.count, args.kinds or MANEUVERS, args.seed, args.horizon)
    n = write_corpus(clips, args.output)
    print(f"wrote {n} synthetic clips to {args.output}")
    return EXIT_OK


def cmd_stats(args) -> int:
    clips = read_corpus(args.corpus)
    stats = compute_trajectory_stats(clips, source_id=Path(args.corpus).name)
    if args.output:
        _dump_json(stats.to_dict(), Path(args.output))
    counts: dict[str, int] = {}
    for c in clips:
        counts[c.source] = counts.get(c.source, 0) + 1
    print(f"clips: {len(clips)}")
    print("source        count")
    for src in sorted(counts):
        print(f"{src:<12} {counts[src]:>6}")
    print("step      mean_x     mean_y      var_x      var_y")
    for i, (m, v) in enumerate(zip(stats.mean, stats.var), 1):
        print(f"{i:>4} {m[0]:>10.4f} {m[1]:>10.4f} {v[0]:>10.4f} {v[1]:>10.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, val = corpus_split(cfg)
    stats = compute_trajectory_stats(train, source_id="train")
    model = None
    if args.stage == "rl":
        ckpt = out / "post_sft.ckpt"
        if not ckpt.is_file():
            raise OrderingError(f"stage rl needs {ckpt}; run `train --stage sft` first")
        model, _ = load_planner(ckpt)
    t0 = time.perf_counter()
    metrics_path = out / ("metrics.jsonl" if args.stage == "both" else f"metrics_{args.stage}.jsonl")
    with open(metrics_path, "w") as fh:
        def log_fn(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

        result = train_pipeline(train, val, cfg.train, cfg.model, cfg.reward, args.stage, model, log_fn)
    final = result.model
    meta = {"seed": cfg.seed}
    if args.stage in ("sft", "both"):
        final.load_state_dict(result.post_sft)
        save_planner(out / "post_sft.ckpt", final, stats, {**meta, "stage": "sft"})
    if args.stage in ("rl", "both"):
        final.load_state_dict(result.post_rl)
        save_planner(out / "post_rl.ckpt", final, stats, {**meta, "stage": "rl"})
    _dump_json(result.summary, out / f"summary_{args.stage}.json")
    cfg.save(out / "run_config.json")
    print(f"{args.stage}: {result.summary['steps']} steps in {time.perf_counter() - t0:.1f}s; "
          f"val avg L2 {result.summary['initial'].get('val_avg_l2', float('nan')):.3f} -> "
          f"{result.summary['post_rl'].get('val_avg_l2', float('nan')):.3f} m")
    return EXIT_OK


def _eval_open(cfg: RunConfig, model: Planner, out: Path, label: str) -> dict:
    _, val = corpus_split(cfg)
    before = model.decode_count
    preds = model.predict(val)
    decodes = model.decode_count - before
    gts = np.stack([c.actions for c in val])
    scenes = [lane_traffic_scene(g, cfg.eval.lane_offset, cfg.dt) for g in gts]
    l2 = mean_l2(preds, gts, cfg.dt)
    cr = collision_rate(list(preds), scenes, cfg.dt)
    row = {"model": label, "dataset": "val", "clips": len(val)}
    row.update({k if k != "avg" else "L2_avg": v for k, v in l2.items()})
    row.update({k if k != "avg" else "CR_avg": v for k, v in cr.items()})
    row["decodes_per_clip"] = decodes / len(val)
    _write_csv([row], out / "eval_open.csv")
    _dump_json(row, out / "eval_open.json")
    k = min(cfg.eval.plot_clips, len(val))
    if k:
        from .plots import plot_trajectories

        plot_trajectories(preds[:k], gts[:k], scenes[:k], out / "eval_open.svg", [c.clip_id for c in val[:k]])
    return row


def _eval_closed(cfg: RunConfig, model: Planner, out: Path, label: str) -> dict:
    suite = scenario_suite(cfg.eval.n_per_kind, cfg.eval.scenario_seed)
    policies = {label: PlannerPolicy(model), "zero-motion": ZeroMotionPolicy(cfg.model.horizon),
                "constant-velocity": ConstantVelocityPolicy(cfg.model.horizon, cfg.dt)}
    rows, report = [], {}
    kw = {"horizon": cfg.model.horizon, "acc_limit": cfg.reward.acc_limit}
    for name, policy in policies.items():
        before = model.decode_count
        traces = run_scenarios(policy, suite, cfg.eval.replan_hz, threads=cfg.threads, **kw)
        scores = score_scenarios(traces)
        row = {"model": name, "scenarios": len(suite), **scores}
        if name == label:
            calls = sum(t.replans for t in traces)
            row["decodes_per_replan"] = (model.decode_count - before) / calls
            report = {"policy_calls": calls, "decode_count": model.decode_count - before}
            from .plots import plot_rollouts

            pick = [next(i for i, s in enumerate(suite) if s.kind == kind) for kind in ("stationary", "frontal", "side")]
            plot_rollouts([traces[i] for i in pick], [suite[i] for i in pick], out / "eval_closed.svg")
        rows.append(row)
    for r in rows:
        r.setdefault("decodes_per_replan", "")
    _write_csv(rows, out / "eval_closed.csv")
    _dump_json({"rows": rows, "decode_report": report}, out / "eval_closed.json")
    return rows[0]


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "post_rl.ckpt"
    model, meta = load_planner(ckpt)
    label = f"planner[{meta.get('stage', '?')}]"
    row = (_eval_open if args.mode == "open" else _eval_closed)(cfg, model, out, label)
    print(json.dumps(row, sort_keys=True))
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plots import plot_training_curves

    path = Path(args.metrics)
    if not path.is_file():
        raise FileNotFoundError(f"metrics log not found: {path}")
    records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    plot_training_curves(records, args.output)
    print(f"wrote {args.output}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aqplan", description="Action-query trajectory planner toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp):
        sp.add_argument("--config", help="JSON run-config file (defaults apply when omitted)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field by dotted path, e.g. train.sft.lr=1e-3 (repeatable)")
        sp.add_argument("--output-dir", help="override output_dir")
        sp.add_argument("--corpus", help="override data.corpus (JSON-lines corpus)")
        sp.add_argument("--seed", type=int, help="override seed")
        sp.add_argument("--threads", type=int, help="worker cap for parallel stages (default 1)")

    sp = sub.add_parser("ingest", help="convert a source fixture into a unified JSON-lines corpus")
    sp.add_argument("--source", required=True, choices=SOURCES, help="source tag")
    sp.add_argument("--input", required=True, action="append", help="fixture file (repeatable)")
    sp.add_argument("--output", required=True, help="corpus path to write")
    sp.add_argument("--horizon", type=int, default=10, help="future waypoints per clip")
    sp.add_argument("--include-origin-row", action="store_true", help="keep the t=0 origin row in actions")
    sp.add_argument("--threads", type=int, default=1, help="parallel adapters when several inputs are given")
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("stats", help="per-step trajectory mean/variance and per-source counts")
    sp.add_argument("--corpus", required=True, help="JSON-lines corpus")
    sp.add_argument("--output", help="write statistics JSON here")
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("gen-synth", help="generate a synthetic maneuver corpus")
    sp.add_argument("--count", type=int, default=2000, help="number of clips")
    sp.add_argument("--seed", type=int, default=0, help="generator seed")
    sp.add_argument("--kinds", nargs="+", choices=MANEUVERS, help="maneuver kinds to draw from (default all)")
    sp.add_argument("--horizon", type=int, default=10, help="future waypoints per clip")
    sp.add_argument("--output", required=True, help="corpus path to write")
    sp.set_defaults(func=cmd_gen_synth)

    sp = sub.add_parser("train", help="supervised then GRPO training")
    run_flags(sp)
    sp.add_argument("--stage", choices=("sft", "rl", "both"), default="both", help="which stage(s) to run")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="open-loop metrics or closed-loop scenarios")
    run_flags(sp)
    sp.add_argument("--checkpoint", help="planner checkpoint (default <output_dir>/post_rl.ckpt)")
    sp.add_argument("--mode", choices=("open", "closed"), default="open", help="evaluation protocol")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("plot", help="render training curves from a metrics log")
    sp.add_argument("--metrics", required=True, help="metrics JSON-lines log")
    sp.add_argument("--output", required=True, help="SVG path to write")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FileNotFoundError, IsADirectoryError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OrderingError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
