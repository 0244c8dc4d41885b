import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from aqplan.checkpoint import load_planner
from aqplan.cli import build_parser, main
from aqplan.data import compute_trajectory_stats, read_corpus

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "tests" / "fixtures"
SMOKE = str(ROOT / "configs" / "smoke.json")


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    assert run("train", "--config", SMOKE, "--output-dir", out, "--stage", "both") == 0
    return out


# -- help -----------------------------------------------------------------------


def test_help_lists_every_flag():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    assert set(sub.choices) == {"ingest", "stats", "gen-synth", "train", "eval", "plot"}
    for name, sp in sub.choices.items():
        text = sp.format_help()
        for action in sp._actions:
            for flag in action.option_strings:
                assert flag in text, (name, flag)


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "aqplan.cli", "train", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for flag in ("--config", "--set", "--stage", "--seed", "--threads", "--output-dir", "--corpus"):
        assert flag in res.stdout


# -- ingest / stats / gen-synth ---------------------------------------------------


def test_ingest_fixture_count_and_idempotent(tmp_path, capsys):
    out = tmp_path / "navsim.jsonl"
    assert run("ingest", "--source", "navsim", "--input", FIXTURES / "navsim.json", "--output", out) == 0
    clips = read_corpus(out)
    # three clean clips; the fourth carries a NaN and is skipped
    assert len(clips) == 3
    first = out.read_bytes()
    assert run("ingest", "--source", "navsim", "--input", FIXTURES / "navsim.json", "--output", out) == 0
    assert out.read_bytes() == first


def test_ingest_several_inputs(tmp_path):
    out = tmp_path / "two.jsonl"
    assert run("ingest", "--source", "kitti", "--input", FIXTURES / "kitti.txt", "--input", FIXTURES / "kitti.txt",
               "--output", out, "--threads", 2) == 0
    assert len(read_corpus(out)) == 6


def test_ingest_bad_inputs_exit_2(tmp_path, capsys):
    assert run("ingest", "--source", "navsim", "--input", tmp_path / "missing.json", "--output", tmp_path / "o.jsonl") == 2
    assert "missing.json" in capsys.readouterr().err
    empty = tmp_path / "empty.json"
    empty.write_text("[]")
    assert run("ingest", "--source", "navsim", "--input", empty, "--output", tmp_path / "o.jsonl") == 2
    assert not (tmp_path / "o.jsonl").exists()


def test_stats_matches_library(tmp_path, capsys):
    corpus = tmp_path / "syn.jsonl"
    assert run("gen-synth", "--count", 25, "--seed", 3, "--output", corpus) == 0
    assert run("stats", "--corpus", corpus, "--output", tmp_path / "s.json") == 0
    printed = capsys.readouterr().out
    assert "synthetic" in printed and "25" in printed
    expected = compute_trajectory_stats(read_corpus(corpus), source_id="syn.jsonl").to_dict()
    assert json.loads((tmp_path / "s.json").read_text()) == expected


def test_stats_degenerate_corpus(tmp_path, capsys):
    corpus = tmp_path / "one.jsonl"
    assert run("ingest", "--source", "nuscenes", "--input", FIXTURES / "nuscenes.jsonl", "--output", corpus) == 0
    first = corpus.read_text().splitlines()[0]
    corpus.write_text("\n".join([first] * 3) + "\n")
    assert run("stats", "--corpus", corpus, "--output", tmp_path / "s.json") == 0
    stats = json.loads((tmp_path / "s.json").read_text())
    assert np.all(np.array(stats["var"]) == 0.0)


def test_gen_synth_kinds(tmp_path):
    out = tmp_path / "stops.jsonl"
    assert run("gen-synth", "--count", 10, "--kinds", "stop", "--output", out) == 0
    clips = read_corpus(out)
    assert len(clips) == 10 and all("Intent: stop" in c.reasoning_text for c in clips)


# -- train / eval / plot ------------------------------------------------------------


def test_train_outputs(trained):
    summary = json.loads((trained / "summary_both.json").read_text())
    lines = (trained / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == summary["steps"] > 0
    stages = [json.loads(l)["stage"] for l in lines]
    assert stages.index("rl") > 0 and set(stages) == {"sft", "rl"}
    for name in ("post_sft.ckpt", "post_rl.ckpt", "run_config.json"):
        assert (trained / name).is_file()
    model, meta = load_planner(trained / "post_rl.ckpt")
    assert meta["stage"] == "rl" and model.cfg.d_model == 16


def test_staged_training_matches_combined(trained, tmp_path):
    assert run("train", "--config", SMOKE, "--output-dir", tmp_path, "--stage", "sft") == 0
    assert (tmp_path / "post_sft.ckpt").read_bytes() == (trained / "post_sft.ckpt").read_bytes()
    assert run("train", "--config", SMOKE, "--output-dir", tmp_path, "--stage", "rl") == 0
    assert (tmp_path / "post_rl.ckpt").read_bytes() == (trained / "post_rl.ckpt").read_bytes()
    n_sft = len((tmp_path / "metrics_sft.jsonl").read_text().splitlines())
    n_rl = len((tmp_path / "metrics_rl.jsonl").read_text().splitlines())
    assert n_sft + n_rl == len((trained / "metrics.jsonl").read_text().splitlines())


def test_rl_without_sft_checkpoint_exit_3(tmp_path, capsys):
    assert run("train", "--config", SMOKE, "--output-dir", tmp_path, "--stage", "rl") == 3
    assert "post_sft.ckpt" in capsys.readouterr().err


def test_bad_config_exit_2(tmp_path, capsys):
    assert run("train", "--config", SMOKE, "--output-dir", tmp_path, "--set", "train.rl.group_size=1") == 2
    assert "train.rl.group_size" in capsys.readouterr().err
    assert not (tmp_path / "metrics.jsonl").exists()
    assert run("train", "--config", tmp_path / "nope.json") == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert run("train", "--config", bad) == 2


def test_eval_open(trained, capsys):
    assert run("eval", "--config", SMOKE, "--output-dir", trained, "--mode", "open") == 0
    row = json.loads((trained / "eval_open.json").read_text())
    for key in ("L2@1s", "L2@2s", "L2@3s", "L2_avg", "CR@1s", "CR@2s", "CR@3s", "CR_avg"):
        assert key in row
    assert row["decodes_per_clip"] == 1.0
    assert (trained / "eval_open.csv").read_text().startswith("model,dataset,clips")
    assert (trained / "eval_open.svg").read_text().lstrip().startswith("<?xml")


def test_eval_closed(trained):
    ckpt = trained / "post_sft.ckpt"
    assert run("eval", "--config", SMOKE, "--output-dir", trained, "--mode", "closed", "--checkpoint", ckpt) == 0
    report = json.loads((trained / "eval_closed.json").read_text())
    models = [r["model"] for r in report["rows"]]
    assert models == ["planner[sft]", "zero-motion", "constant-velocity"]
    for kind in ("stationary", "frontal", "side"):
        assert f"score@{kind}" in report["rows"][0] and f"CR@{kind}" in report["rows"][0]
    dr = report["decode_report"]
    assert dr["policy_calls"] == dr["decode_count"] > 0
    assert (trained / "eval_closed.svg").is_file()


def test_eval_missing_checkpoint_exit_2(tmp_path):
    assert run("eval", "--config", SMOKE, "--output-dir", tmp_path) == 2


def test_plot(trained, tmp_path):
    out = tmp_path / "curves.svg"
    assert run("plot", "--metrics", trained / "metrics.jsonl", "--output", out) == 0
    first = out.read_bytes()
    assert run("plot", "--metrics", trained / "metrics.jsonl", "--output", out) == 0
    assert out.read_bytes() == first
    assert run("plot", "--metrics", tmp_path / "none.jsonl", "--output", out) == 2
