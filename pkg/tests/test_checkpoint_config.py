import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from aqplan.checkpoint import load_checkpoint, load_planner, save_checkpoint, save_planner
from aqplan.config import ConfigError, RunConfig, apply_overrides, config_from_dict, load_run_config, parse_override
from aqplan.data import compute_trajectory_stats, synth_scenarios
from aqplan.errors import ContractError
from aqplan.model import ModelConfig, Planner

# -- checkpoint container -----------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(
    data=st.dictionaries(
        st.text("abcdefgh._", min_size=1, max_size=12),
        arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=5), elements=st.floats(allow_nan=False)),
        max_size=5,
    )
)
def test_checkpoint_round_trip(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("ck") / "x.ckpt"
    save_checkpoint(path, data, {"note": "unit", "n": 3})
    back, meta = load_checkpoint(path)
    assert meta == {"note": "unit", "n": 3}
    assert back.keys() == data.keys()
    for k in data:
        assert back[k].shape == data[k].shape
        assert back[k].tobytes() == np.asarray(data[k], dtype="<f8").tobytes()


def test_checkpoint_bytes_canonical(tmp_path):
    a = {"w": np.arange(6.0).reshape(2, 3), "b": np.ones(2)}
    save_checkpoint(tmp_path / "1.ckpt", a, {"z": 1, "a": 2})
    save_checkpoint(tmp_path / "2.ckpt", dict(reversed(list(a.items()))), {"a": 2, "z": 1})
    assert (tmp_path / "1.ckpt").read_bytes() == (tmp_path / "2.ckpt").read_bytes()


def test_checkpoint_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ContractError):
        load_checkpoint(bad)
    good = tmp_path / "good.ckpt"
    save_checkpoint(good, {"w": np.arange(100.0)})
    blob = good.read_bytes()
    (tmp_path / "short.ckpt").write_bytes(blob[:-16])
    with pytest.raises(ContractError, match="truncated"):
        load_checkpoint(tmp_path / "short.ckpt")
    future = bytearray(blob)
    future[6] = 9
    (tmp_path / "v9.ckpt").write_bytes(bytes(future))
    with pytest.raises(ContractError, match="version"):
        load_checkpoint(tmp_path / "v9.ckpt")


def test_planner_round_trip(tmp_path):
    clips = synth_scenarios(12, seed=4)
    stats = compute_trajectory_stats(clips, source_id="unit")
    model = Planner(ModelConfig(d_model=16, enc_layers=2, n_heads=2, dec_blocks=1), stats, seed=3)
    model.log_std.data[:] = -1.0
    save_planner(tmp_path / "p.ckpt", model, stats, {"stage": "sft"})
    back, meta = load_planner(tmp_path / "p.ckpt")
    assert meta["stage"] == "sft" and meta["query_init"]["seed"] == model.query_meta["seed"]
    assert np.array_equal(back.predict(clips), model.predict(clips))
    assert np.array_equal(back.policy_log_std().data, model.policy_log_std().data)


def test_load_planner_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_planner(tmp_path / "missing.ckpt")
    save_checkpoint(tmp_path / "bare.ckpt", {"w": np.zeros(2)})
    with pytest.raises(ContractError):
        load_planner(tmp_path / "bare.ckpt")


# -- run config -----------------------------------------------------------------


def test_defaults_validate():
    cfg = config_from_dict({})
    assert isinstance(cfg, RunConfig)
    assert cfg.train.sft.lr == 5e-5 and cfg.train.rl.group_size == 8 and cfg.train.rl.kl_beta == 0.04
    assert cfg.reward.steer_ratio_limit == 0.84


def test_problems_report_field_paths():
    raw = {"train": {"rl": {"group_size": 1, "lr": -1}, "sft": {"bogus": 3}}, "model": {"d_model": "wide"}, "dt": 0.0}
    with pytest.raises(ConfigError) as info:
        config_from_dict(raw)
    text = "\n".join(info.value.problems)
    for path in ("train.sft.bogus: unknown field", "model.d_model: expected an integer"):
        assert path in text
    raw = {"train": {"rl": {"group_size": 1, "kl_beta": -0.1}}, "reward": {"dt": 0.25}}
    with pytest.raises(ConfigError) as info:
        config_from_dict(raw)
    text = "\n".join(info.value.problems)
    assert "train.rl.group_size" in text and "train.rl.kl_beta" in text and "reward.dt" in text


def test_reward_section_errors_are_reported():
    with pytest.raises(ConfigError) as info:
        config_from_dict({"reward": {"theta1": 0, "theta2": 0, "theta3": 0}})
    assert any("reward.theta" in p for p in info.value.problems)


def test_missing_corpus_reported(tmp_path):
    with pytest.raises(ConfigError, match="data.corpus"):
        config_from_dict({"data": {"corpus": str(tmp_path / "nope.jsonl")}})


def test_overrides():
    assert parse_override("train.sft.lr=1e-3") == (["train", "sft", "lr"], 1e-3)
    assert parse_override("output_dir=runs/x") == (["output_dir"], "runs/x")
    raw = apply_overrides({"train": {"sft": {"lr": 1.0}}}, ["train.sft.lr=0.5", "seed=4", "model.refine_layers=[0,1]"])
    assert raw == {"train": {"sft": {"lr": 0.5}}, "seed": 4, "model": {"refine_layers": [0, 1]}}
    with pytest.raises(ConfigError):
        parse_override("no_equals_sign")
    with pytest.raises(ConfigError):
        apply_overrides({"seed": 1}, ["seed.inner=2"])


def test_top_level_seed_drives_training(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 7, "data": {"val_fraction": 0.2}}))
    cfg = load_run_config(p)
    assert cfg.train.seed == 7 and cfg.train.val_fraction == 0.2
    assert load_run_config(p, ["seed=9"]).train.seed == 9


def test_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_run_config(tmp_path / "none.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_run_config(bad)


def test_save_round_trip(tmp_path):
    cfg = load_run_config(None, ["train.sft.lr=0.001", "model.d_model=32"])
    cfg.save(tmp_path / "rc.json")
    again = load_run_config(tmp_path / "rc.json")
    assert again.to_dict() == cfg.to_dict()


@pytest.mark.parametrize("name", ["desk.json", "smoke.json"])
def test_bundled_configs_validate(name):
    from pathlib import Path

    cfg = load_run_config(Path(__file__).resolve().parents[1] / "configs" / name)
    assert cfg.train.rl.kl_beta == 0.04
