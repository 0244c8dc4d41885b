"""Regenerate the per-source fixture files under tests/fixtures.

Each fixture holds three valid clips drawn from the synthetic maneuver model
and one record with a NaN coordinate that the ingest path must drop.
"""

import csv
import json
import math
from pathlib import Path

import numpy as np

from aqplan.data import MANEUVERS, clip_from_maneuver, sample_maneuver

OUT = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


def clips(tag: str):
    rng = np.random.default_rng(sum(map(ord, tag)))
    out = []
    for i in range(4):
        m = sample_maneuver(MANEUVERS[(i + len(tag)) % len(MANEUVERS)], rng)
        out.append(clip_from_maneuver(m, f"{tag}-{i:03d}"))
    return out


def rows7(c):
    return [[s.t_offset, *s.position, *s.velocity, *s.acceleration] for s in c.history]


def r(v, nd=6):
    return [round(float(x), nd) for x in v]


def poison(c):
    # one NaN in the middle of the history
    rows = rows7(c)
    rows[3][1] = float("nan")
    return rows


def navsim(cs):
    scenes = []
    for k, c in enumerate(cs):
        hist = poison(c) if k == 3 else rows7(c)
        scenes.append({
            "token": c.clip_id,
            "ego_history": [r(h) for h in hist],
            "future": [r(a) for a in c.actions],
            "reasoning": c.reasoning_text,
            "cameras": [f"cam_front/{c.clip_id}.jpg"],
        })
    (OUT / "navsim.json").write_text(json.dumps({"scenes": scenes}, indent=1))


def nuscenes(cs):
    with open(OUT / "nuscenes.jsonl", "w") as fh:
        for k, c in enumerate(cs):
            hist = poison(c) if k == 3 else rows7(c)
            fh.write(json.dumps({
                "sample_token": c.clip_id,
                "ego_states": [dict(zip(("t", "x", "y", "vx", "vy", "ax", "ay"), r(h))) for h in hist],
                # nuScenes-style plans carry the origin row
                "gt_trajectory": [[0.0, 0.0]] + [r(a) for a in c.actions],
                "cot": c.reasoning_text,
                "cams": {"CAM_FRONT": f"samples/CAM_FRONT/{c.clip_id}.jpg"},
            }) + "\n")


def waymo(cs):
    ox, oy, yaw = 1203.5, -88.25, 0.6
    cy, sy = math.cos(yaw), math.sin(yaw)

    def world(p):
        return [ox + cy * p[0] - sy * p[1], oy + sy * p[0] + cy * p[1]]

    def wvec(v):
        return [cy * v[0] - sy * v[1], sy * v[0] + cy * v[1]]

    with open(OUT / "waymo.jsonl", "w") as fh:
        for k, c in enumerate(cs):
            past = []
            for j, s in enumerate(c.history):
                x, y = world(s.position)
                vx, vy = wvec(s.velocity)
                if k == 3 and j == 3:
                    x = float("nan")
                past.append({"t": s.t_offset, "x": round(x, 6), "y": round(y, 6), "vx": round(vx, 6), "vy": round(vy, 6)})
            fh.write(json.dumps({
                "scenario_id": c.clip_id,
                "ego_pose": {"x": ox, "y": oy, "heading": yaw},
                "past": past,
                "future": [r(world(a)) for a in c.actions],
            }) + "\n")


def argoverse2(cs):
    with open(OUT / "argoverse2.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["clip_id", "phase", "t", "x", "y", "vx", "vy", "ax", "ay"])
        for k, c in enumerate(cs):
            for h in (poison(c) if k == 3 else rows7(c)):
                w.writerow([c.clip_id, "past", *r(h)])
            for i, a in enumerate(c.actions, 1):
                w.writerow([c.clip_id, "future", 0.5 * i, *r(a), "", "", "", ""])


def kitti(cs):
    with open(OUT / "kitti.txt", "w") as fh:
        fh.write("# H <clip> t x y vx vy ax ay | F <clip> x y\n")
        for k, c in enumerate(cs):
            for h in (poison(c) if k == 3 else rows7(c)):
                fh.write(" ".join(["H", c.clip_id] + [repr(v) for v in r(h)]) + "\n")
            for a in c.actions:
                fh.write(" ".join(["F", c.clip_id] + [repr(v) for v in r(a)]) + "\n")


def mapillary(cs):
    with open(OUT / "mapillary.jsonl", "w") as fh:
        for k, c in enumerate(cs):
            past = [r(s.position) for s in c.history]
            if k == 3:
                past[3][0] = float("nan")
            fh.write(json.dumps({
                "id": c.clip_id,
                "past_xy": past,
                "future_xy": [r(a) for a in c.actions],
                "caption": c.reasoning_text,
                "image": f"images/{c.clip_id}.jpg",
            }) + "\n")


def once(cs):
    frames = []
    for k, c in enumerate(cs):
        hist = poison(c) if k == 3 else rows7(c)
        frames.append({
            "frame_id": c.clip_id,
            "history": [{"ts_ms": int(round(h[0] * 1000)), "pos": r(h[1:3]), "vel": r(h[3:5]), "acc": r(h[5:7])} for h in hist],
            "plan": [r(a) for a in c.actions],
            "reasoning": c.reasoning_text,
            "cams": [f"cam01/{c.clip_id}.jpg"],
        })
    (OUT / "once.json").write_text(json.dumps({"frames": frames}, indent=1))


def idd(cs):
    with open(OUT / "idd.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["clip_id", "history", "future", "note"])
        for k, c in enumerate(cs):
            hist = poison(c) if k == 3 else rows7(c)
            w.writerow([
                c.clip_id,
                "|".join(":".join(repr(v) for v in r(h)) for h in hist),
                "|".join(":".join(repr(v) for v in r(a)) for a in c.actions),
                c.reasoning_text,
            ])


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    for fn in (navsim, nuscenes, waymo, argoverse2, kitti, mapillary, once, idd):
        fn(clips(fn.__name__))
        print("wrote", fn.__name__)
