"""Source adapters: small per-dataset fixture schemas -> UnifiedClip.

Each adapter parses its own file layout (see docs/adapters.md) into raw
records; a shared normaliser then derives missing kinematics, strips the
optional leading origin row and applies the rule-based clip checks.
Records that fail are dropped with a logged reason.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .data import DEFAULT_HORIZON, DT, SOURCES, EgoState, UnifiedClip, clip_problems
from .errors import ContractError

log = logging.getLogger(__name__)

RawRecord = dict  # clip_id, history rows [[t, x, y, vx, vy, ax, ay] | [t, x, y]], actions, reasoning, cams


def _read_json(path: Path):
    text = path.read_text(encoding="utf-8")
    return json.loads(text) if text.strip() else None


def _read_jsonl(path: Path) -> Iterator[tuple[int, dict | Exception]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                yield lineno, exc


def _navsim(path: Path):
    doc = _read_json(path)
    for i, scene in enumerate((doc or {}).get("scenes", [])):
        yield f"record {i}", lambda s=scene: {
            "clip_id": s["token"],
            "history": s["ego_history"],
            "actions": s["future"],
            "reasoning": s.get("reasoning"),
            "cams": s.get("cameras"),
        }


def _nuscenes(path: Path):
    for lineno, rec in _read_jsonl(path):
        def build(r=rec):
            if isinstance(r, Exception):
                raise r
            return {
                "clip_id": r["sample_token"],
                "history": [[s["t"], s["x"], s["y"], s["vx"], s["vy"], s["ax"], s["ay"]] for s in r["ego_states"]],
                "actions": r["gt_trajectory"],
                "reasoning": r.get("cot"),
                "cams": list(r.get("cams", {}).values()) or None,
            }

        yield f"line {lineno}", build


def _waymo(path: Path):
    # world-frame records; converted to the ego frame at t=0
    for lineno, rec in _read_jsonl(path):
        def build(r=rec):
            if isinstance(r, Exception):
                raise r
            pose = r["ego_pose"]
            ox, oy, yaw = float(pose["x"]), float(pose["y"]), float(pose["heading"])
            c, s = math.cos(-yaw), math.sin(-yaw)

            def pt(x, y):
                dx, dy = x - ox, y - oy
                return [c * dx - s * dy, s * dx + c * dy]

            def vec(x, y):
                return [c * x - s * y, s * x + c * y]

            hist = [[p["t"], *pt(p["x"], p["y"]), *vec(p["vx"], p["vy"])] for p in r["past"]]
            return {
                "clip_id": r["scenario_id"],
                "history": hist,
                "actions": [pt(x, y) for x, y in r["future"]],
                "reasoning": r.get("reasoning"),
                "cams": None,
            }

        yield f"line {lineno}", build


def _argoverse2(path: Path):
    groups: "OrderedDict[str, dict]" = OrderedDict()
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            g = groups.setdefault(row["clip_id"], {"past": [], "future": []})
            g[row["phase"]].append(row)
    for cid, g in groups.items():
        def build(cid=cid, g=g):
            keys = ("t", "x", "y", "vx", "vy", "ax", "ay")
            past = sorted(([float(r[k]) for k in keys] for r in g["past"]), key=lambda v: v[0])
            fut = sorted(([float(r["t"]), float(r["x"]), float(r["y"])] for r in g["future"]), key=lambda v: v[0])
            return {"clip_id": cid, "history": past, "actions": [f[1:] for f in fut], "reasoning": None, "cams": None}

        yield f"clip {cid}", build


def _kitti(path: Path):
    groups: "OrderedDict[str, dict]" = OrderedDict()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag, cid, vals = parts[0], parts[1], parts[2:]
            g = groups.setdefault(cid, {"H": [], "F": [], "bad": None})
            if tag not in ("H", "F"):
                g["bad"] = f"unknown line tag {tag!r}"
                continue
            g[tag].append(vals)
    for cid, g in groups.items():
        def build(cid=cid, g=g):
            if g["bad"]:
                raise ValueError(g["bad"])
            return {
                "clip_id": cid,
                "history": [[float(v) for v in row] for row in g["H"]],
                "actions": [[float(v) for v in row] for row in g["F"]],
                "reasoning": None,
                "cams": None,
            }

        yield f"clip {cid}", build


def _mapillary(path: Path):
    # positions only; kinematics are derived by finite differences
    for lineno, rec in _read_jsonl(path):
        def build(r=rec):
            if isinstance(r, Exception):
                raise r
            past = r["past_xy"]
            n = len(past)
            return {
                "clip_id": r["id"],
                "history": [[DT * (i - n + 1), float(x), float(y)] for i, (x, y) in enumerate(past)],
                "actions": r["future_xy"],
                "reasoning": r.get("caption"),
                "cams": [r["image"]] if r.get("image") else None,
            }

        yield f"line {lineno}", build


def _once(path: Path):
    doc = _read_json(path)
    for i, fr in enumerate((doc or {}).get("frames", [])):
        yield f"frame {i}", lambda f=fr: {
            "clip_id": f["frame_id"],
            "history": [[h["ts_ms"] / 1000.0, *h["pos"], *h["vel"], *h["acc"]] for h in f["history"]],
            "actions": f["plan"],
            "reasoning": f.get("reasoning"),
            "cams": f.get("cams"),
        }


def _idd(path: Path):
    with open(path, encoding="utf-8", newline="") as fh:
        for i, row in enumerate(csv.DictReader(fh)):
            def build(row=row):
                hist = [[float(v) for v in item.split(":")] for item in row["history"].split("|")]
                fut = [[float(v) for v in item.split(":")] for item in row["future"].split("|")]
                return {"clip_id": row["clip_id"], "history": hist, "actions": fut, "reasoning": row.get("note") or None, "cams": None}

            yield f"row {i + 1}", build


ADAPTERS: dict[str, Callable[[Path], Iterator]] = {
    "navsim": _navsim,
    "nuscenes": _nuscenes,
    "waymo": _waymo,
    "argoverse2": _argoverse2,
    "kitti": _kitti,
    "mapillary": _mapillary,
    "once": _once,
    "idd": _idd,
}
assert set(ADAPTERS) == set(SOURCES)


def _derive(rows: np.ndarray) -> np.ndarray:
    """Complete [t, x, y(, vx, vy(, ax, ay))] rows by finite differences."""
    t, pos = rows[:, 0], rows[:, 1:3]
    n = len(rows)
    if rows.shape[1] >= 5:
        vel = rows[:, 3:5]
    elif n >= 2:
        vel = np.gradient(pos, t, axis=0)
    else:
        vel = np.zeros_like(pos)
    if rows.shape[1] >= 7:
        acc = rows[:, 5:7]
    elif n >= 2:
        acc = np.gradient(vel, t, axis=0)
    else:
        acc = np.zeros_like(pos)
    return np.column_stack([t, pos, vel, acc])


def normalise(source: str, raw: RawRecord, horizon: int, include_origin_row: bool) -> UnifiedClip:
    rows = np.asarray(raw["history"], dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] not in (3, 5, 7) or len(rows) == 0:
        raise ValueError(f"history rows must have 3, 5 or 7 columns, got shape {rows.shape}")
    if np.isfinite(rows).all():
        rows = _derive(rows)
    else:
        rows = np.column_stack([rows, np.full((len(rows), 7 - rows.shape[1]), np.nan)]) if rows.shape[1] < 7 else rows
    history = [EgoState(float(r[0]), (float(r[1]), float(r[2])), (float(r[3]), float(r[4])), (float(r[5]), float(r[6]))) for r in rows]
    actions = np.asarray(raw["actions"], dtype=np.float64)
    if actions.ndim == 2 and actions.shape[0] == horizon + 1 and not include_origin_row:
        if np.allclose(actions[0], 0.0, atol=1e-9):
            actions = actions[1:]
    return UnifiedClip(str(raw["clip_id"]), source, history, actions, raw.get("reasoning"), raw.get("cams"))


def ingest_adapter(
    source: str,
    path: str | Path,
    horizon: int = DEFAULT_HORIZON,
    include_origin_row: bool = False,
) -> list[UnifiedClip]:
    """Parse one fixture file for ``source``; invalid records are dropped with a logged reason."""
    if source not in ADAPTERS:
        raise ContractError(f"unknown source tag {source!r}; expected one of {SOURCES}")
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such fixture file: {path}")
    clips: list[UnifiedClip] = []
    for where, build in ADAPTERS[source](path):
        try:
            clip = normalise(source, build(), horizon, include_origin_row)
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            log.warning("%s %s: dropped malformed record (%s: %s)", source, where, type(exc).__name__, exc)
            continue
        problems = clip_problems(clip, horizon, include_origin_row)
        if problems:
            log.warning("%s %s (%s): dropped, %s", source, where, clip.clip_id, "; ".join(problems))
            continue
        clips.append(clip)
    if not clips:
        log.warning("%s: no valid clips ingested from %s", source, path)
    return clips


def ingest_many(jobs: list[tuple[str, str | Path]], horizon: int = DEFAULT_HORIZON, include_origin_row: bool = False, threads: int = 1) -> list[UnifiedClip]:
    """Run several adapters (optionally in parallel) and merge in clip_id order."""
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda j: ingest_adapter(j[0], j[1], horizon, include_origin_row), jobs))
    else:
        parts = [ingest_adapter(s, p, horizon, include_origin_row) for s, p in jobs]
    return sorted((c for part in parts for c in part), key=lambda c: c.clip_id)
