import json
import logging
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aqplan.adapters import ingest_adapter, ingest_many, normalise
from aqplan.data import (
    MANEUVERS,
    SOURCES,
    EgoState,
    Maneuver,
    UnifiedClip,
    clip_from_maneuver,
    clip_problems,
    compute_trajectory_stats,
    intent_from_text,
    load_clip,
    read_corpus,
    render_prompt,
    save_clip,
    split,
    synth_scenarios,
    validate_clip,
    write_corpus,
)
from aqplan.errors import ContractError, DimensionError

FIXTURES = Path(__file__).parent / "fixtures"
FIXTURE_FILES = {p.stem: p for p in FIXTURES.iterdir() if p.stem in SOURCES}


def _clip(actions, cid="c", source="navsim"):
    hist = [EgoState(-0.5, (-1.0, 0.0), (2.0, 0.0)), EgoState(0.0, (0.0, 0.0), (2.0, 0.0))]
    return UnifiedClip(cid, source, hist, np.asarray(actions, float))


# --- schema ----------------------------------------------------------------


finite = st.floats(-999, 999, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(
    actions=st.lists(st.tuples(finite, finite), min_size=10, max_size=10),
    hist=st.lists(st.tuples(finite, finite, finite, finite, finite, finite), min_size=1, max_size=8),
    reasoning=st.one_of(st.none(), st.text(max_size=30)),
    cams=st.one_of(st.none(), st.lists(st.text(min_size=1, max_size=10), max_size=3)),
)
def test_clip_json_round_trip(tmp_path_factory, actions, hist, reasoning, cams):
    n = len(hist)
    states = [EgoState(-0.5 * (n - 1 - i), h[:2], h[2:4], h[4:]) for i, h in enumerate(hist)]
    clip = UnifiedClip("rt", "waymo", states, np.array(actions), reasoning, cams)
    path = tmp_path_factory.mktemp("rt") / "clip.json"
    save_clip(clip, path)
    back = load_clip(path)
    assert back.to_dict() == clip.to_dict()
    assert np.array_equal(back.actions, clip.actions)


def test_corpus_round_trip(tmp_path):
    clips = synth_scenarios(20, seed=3)
    write_corpus(clips, tmp_path / "c.jsonl")
    back = read_corpus(tmp_path / "c.jsonl")
    assert [c.to_dict() for c in back] == [c.to_dict() for c in clips]


def test_clip_checks():
    good = _clip(np.zeros((10, 2)))
    assert clip_problems(good) == []
    assert any("non-finite" in p for p in clip_problems(_clip(np.full((10, 2), np.nan))))
    assert any("horizon" in p for p in clip_problems(_clip(np.zeros((9, 2)))))
    assert any("sanity" in p for p in clip_problems(_clip(np.full((10, 2), 1500.0))))
    assert any("source" in p for p in clip_problems(_clip(np.zeros((10, 2)), source="carla")))
    bad_t = UnifiedClip("c", "navsim", [EgoState(-0.3, (0.0, 0.0)), EgoState(0.0, (0.0, 0.0))], np.zeros((10, 2)))
    assert clip_problems(bad_t)
    off_origin = UnifiedClip("c", "navsim", [EgoState(0.0, (1.0, 0.0))], np.zeros((10, 2)))
    assert clip_problems(off_origin)
    with pytest.raises(ContractError):
        validate_clip(_clip(np.zeros((9, 2))))


# --- stats -------------------------------------------------------------------


def test_stats_identical_clips():
    a = np.arange(20.0).reshape(10, 2)
    s = compute_trajectory_stats([_clip(a), _clip(a), _clip(a)])
    assert np.array_equal(s.mean, a) and not s.var.any() and s.count == 3


def test_stats_two_point_variance():
    a, b = np.zeros((10, 2)), np.zeros((10, 2))
    b[4, 0] = 2.0
    s = compute_trajectory_stats([_clip(a), _clip(b)])
    assert s.mean[4, 0] == 1.0 and s.var[4, 0] == 1.0
    assert s.var.sum() == 1.0


def test_stats_single_clip_zero_var():
    s = compute_trajectory_stats([_clip(np.ones((10, 2)))])
    assert not s.var.any()


def test_stats_errors():
    with pytest.raises(ContractError):
        compute_trajectory_stats([])
    with pytest.raises(DimensionError):
        compute_trajectory_stats([_clip(np.zeros((10, 2))), _clip(np.zeros((6, 2)))])


@pytest.mark.parametrize("n", [1, 7, 1000])
def test_stats_match_two_pass_loop(n):
    rng = np.random.default_rng(n)
    clips = [_clip(rng.normal(0, 20, size=(10, 2))) for _ in range(n)]
    s = compute_trajectory_stats(clips)
    for i in range(10):
        for j in range(2):
            vals = [c.actions[i, j] for c in clips]
            mean = 0.0
            for v in vals:
                mean += v
            mean /= len(vals)
            var = 0.0
            for v in vals:
                var += (v - mean) ** 2
            var /= len(vals)
            assert abs(s.mean[i, j] - mean) <= 1e-12
            assert abs(s.var[i, j] - var) <= 1e-12


# --- prompt --------------------------------------------------------------------


def test_prompt_template():
    clip = synth_scenarios(1, kinds={"straight"}, seed=1)[0]
    text = render_prompt(clip)
    assert text.splitlines()[0] == "system: You are a helpful assistant"
    assert text.count("(t-") == 7
    assert "(t-0.0s) [0.0, 0.0]" in text
    assert "<think>" in text and "<answer>" in text
    assert "next 10 timesteps" in text


def test_prompt_two_decimals():
    hist = [EgoState(-0.5, (-1.23456, 0.004), (2.466, -0.0), (0.1, 0.0)), EgoState(0.0, (0.0, 0.0), (2.5, 0.0))]
    text = render_prompt(UnifiedClip("c", "navsim", hist, np.zeros((10, 2))))
    assert "(t-0.5s) [-1.23, 0.0]" in text
    assert "Velocity: X 2.47, Y 0.0 m/s" in text


def test_intent_tag():
    assert intent_from_text("Intent: left-turn. Current speed 3.0 m/s.") == "left-turn"
    assert intent_from_text("Intent: fly") is None
    assert intent_from_text(None) is None


# --- synthetic -----------------------------------------------------------------------


def test_straight_seven_mps():
    clip = clip_from_maneuver(Maneuver("straight", 7.0), "s")
    expected = np.column_stack([3.5 * np.arange(1, 11), np.zeros(10)])
    assert np.allclose(clip.actions, expected, atol=1e-12)


def test_synth_deterministic():
    a = synth_scenarios(30, seed=11)
    b = synth_scenarios(30, seed=11)
    assert [c.to_dict() for c in a] == [c.to_dict() for c in b]
    assert [c.to_dict() for c in synth_scenarios(30, seed=12)] != [c.to_dict() for c in a]


def test_synth_stop_profile():
    for clip in synth_scenarios(40, kinds={"stop"}, seed=5):
        steps = np.hypot(*np.diff(np.vstack([[0.0, 0.0], clip.actions]), axis=0).T)
        assert np.all(np.diff(steps) <= 1e-9)
        assert steps[-1] < 0.5


def test_synth_kinds_validation():
    with pytest.raises(ContractError):
        synth_scenarios(5, kinds=set())
    with pytest.raises(ContractError):
        synth_scenarios(5, kinds={"drift"})
    assert {intent_from_text(c.reasoning_text) for c in synth_scenarios(50, kinds={"left-turn", "stop"}, seed=0)} == {
        "left-turn",
        "stop",
    }


def _fd_consistent(f, df, h=0.5):
    """Central differences of f match df; exact where df' is constant over the stencil."""
    for i in range(1, len(f) - 1):
        fd = (f[i + 1] - f[i - 1]) / (2 * h)
        ddf = np.diff(df[i - 1:i + 2], axis=0) / h
        smooth = np.allclose(ddf[0], ddf[1], atol=1e-9)
        # away from smooth stretches the stencil straddles an onset or a full stop
        tol = 0.02 if smooth else h * np.abs(ddf).max() + 0.02
        assert np.abs(fd - df[i]).max() <= tol


def test_synth_clips_validate_and_are_consistent():
    from aqplan.rewards import RewardConfig, r_acc, r_steer

    cfg = RewardConfig()
    for clip in synth_scenarios(300, seed=2):
        validate_clip(clip)
        assert r_steer(clip.actions, cfg) == 1.0
        assert r_acc(clip.actions, cfg) == 1.0
        pos = np.array([s.position for s in clip.history])
        vel = np.array([s.velocity for s in clip.history])
        acc = np.array([s.acceleration for s in clip.history])
        _fd_consistent(pos, vel)
        _fd_consistent(vel, acc)


def test_synth_constant_acceleration_is_exact():
    m = Maneuver("accelerate", 6.0, accel=1.5, onset=-3.0)
    clip = clip_from_maneuver(m, "a")
    pos = np.array([s.position for s in clip.history] + list(clip.actions))
    vel = np.array([s.velocity for s in clip.history])
    fd = (pos[2:7] - pos[0:5]) / 1.0
    assert np.allclose(fd, vel[1:6], atol=1e-12)


def test_maneuver_kinds_cover_all():
    kinds = {intent_from_text(c.reasoning_text) for c in synth_scenarios(200, seed=0)}
    assert kinds == set(MANEUVERS)


# --- split -----------------------------------------------------------------------


def test_split_sizes_and_partition():
    clips = list(range(10))
    tr, va = split(clips, 0.2, seed=3)
    assert len(tr) == 8 and len(va) == 2
    assert sorted(tr + va) == clips
    assert split(clips, 0.2, seed=3) == (tr, va)


@pytest.mark.parametrize("frac", [0.0, 1.0, -0.1, 1.5])
def test_split_bad_fraction(frac):
    with pytest.raises(ContractError):
        split(list(range(10)), frac)


# --- adapters ------------------------------------------------------------------------


def test_fixture_for_every_source():
    assert set(FIXTURE_FILES) == set(SOURCES)


@pytest.mark.parametrize("source", SOURCES)
def test_adapter_fixture_three_clips_nan_dropped(source, caplog):
    with caplog.at_level(logging.WARNING):
        clips = ingest_adapter(source, FIXTURE_FILES[source])
    assert [c.clip_id for c in clips] == [f"{source}-{i:03d}" for i in range(3)]
    assert any(f"{source}-003" in r.getMessage() and "non-finite" in r.getMessage() for r in caplog.records)
    for c in clips:
        validate_clip(c)
        assert c.source == source
        assert c.actions.shape == (10, 2)


def test_adapters_agree_on_same_underlying_clip():
    # waymo fixtures are world frame; after conversion the first waypoint must be ahead of the ego
    clips = ingest_adapter("waymo", FIXTURE_FILES["waymo"])
    for c in clips:
        assert c.actions[0, 0] > 0 and abs(c.actions[0, 1]) < 1.0


def test_nuscenes_origin_row_stripped():
    raw = json.loads(FIXTURE_FILES["nuscenes"].read_text().splitlines()[0])
    assert len(raw["gt_trajectory"]) == 11
    clip = ingest_adapter("nuscenes", FIXTURE_FILES["nuscenes"])[0]
    assert np.allclose(clip.actions, raw["gt_trajectory"][1:])


def test_positions_only_source_derives_kinematics():
    clip = ingest_adapter("mapillary", FIXTURE_FILES["mapillary"])[0]
    assert all(np.isfinite(s.velocity).all() for s in clip.history)
    assert clip.history[-1].velocity[0] > 0


def test_empty_file_warns(tmp_path, caplog):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    with caplog.at_level(logging.WARNING):
        assert ingest_adapter("nuscenes", p) == []
    assert any("no valid clips" in r.getMessage() for r in caplog.records)


def test_missing_file_and_unknown_source(tmp_path):
    with pytest.raises(FileNotFoundError):
        ingest_adapter("kitti", tmp_path / "nope.txt")
    with pytest.raises(ContractError):
        ingest_adapter("carla", FIXTURE_FILES["kitti"])


def test_malformed_line_dropped(tmp_path, caplog):
    p = tmp_path / "n.jsonl"
    lines = FIXTURE_FILES["nuscenes"].read_text().splitlines()
    p.write_text("{not json\n" + lines[0] + "\n" + json.dumps({"sample_token": "x"}) + "\n")
    with caplog.at_level(logging.WARNING):
        clips = ingest_adapter("nuscenes", p)
    assert len(clips) == 1


def test_ingest_many_sorted_and_thread_independent():
    jobs = [(s, FIXTURE_FILES[s]) for s in SOURCES]
    a = ingest_many(jobs, threads=1)
    b = ingest_many(list(reversed(jobs)), threads=4)
    assert [c.clip_id for c in a] == sorted(c.clip_id for c in a)
    assert [c.to_dict() for c in a] == [c.to_dict() for c in b]
    assert len(a) == 3 * len(SOURCES)


def test_include_origin_row_flag():
    raw = {"clip_id": "x", "history": [[0.0, 0.0, 0.0]], "actions": [[0.0, 0.0]] + [[i, 0.0] for i in range(1, 11)]}
    kept = normalise("navsim", raw, 10, include_origin_row=True)
    stripped = normalise("navsim", raw, 10, include_origin_row=False)
    assert kept.actions.shape == (11, 2) and stripped.actions.shape == (10, 2)
    assert clip_problems(kept, 10, include_origin_row=True) == []
