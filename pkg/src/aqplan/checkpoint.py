"""Versioned checkpoint container: a JSON header followed by raw float64 arrays.

Layout::

    b"AQCKPT"            6-byte magic
    u16 little-endian    format version
    u64 little-endian    header length in bytes
    header               UTF-8 JSON: {"version", "meta", "arrays": [{"name", "shape", "offset", "nbytes"}]}
    payload              concatenated little-endian float64 arrays, C order

Keys are written in sorted order and the JSON is canonical, so identical
parameters and metadata give byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"AQCKPT"
VERSION = 1


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8", order="C")  # keeps 0-d shapes
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"version": VERSION, "meta": meta or {}, "arrays": entries}, sort_keys=True, separators=(",", ":"))
    hb = header.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HQ", VERSION, len(hb)))
        fh.write(hb)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if blob[:6] != MAGIC or len(blob) < 16:
        raise ContractError(f"{path}: not a checkpoint container")
    version, hlen = struct.unpack("<HQ", blob[6:16])
    if version != VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise ContractError(f"{path}: corrupt checkpoint header ({exc})") from exc
    base = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(blob):
            raise ContractError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(blob[start:start + e["nbytes"]], dtype="<f8").reshape(tuple(e["shape"]))
        arrays[e["name"]] = arr.astype(np.float64)
    return arrays, header["meta"]


def save_planner(path: str | Path, model, stats, extra: dict | None = None) -> None:
    """Write a Planner with enough metadata (config, query stats) to rebuild it."""
    meta = {"model": model.config_dict(), "stats": stats.to_dict(), "query_init": dict(model.query_meta)}
    meta.update(extra or {})
    save_checkpoint(path, model.state_dict(), meta)


def load_planner(path: str | Path):
    from .data import TrajectoryStats
    from .model import ModelConfig, Planner

    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    arrays, meta = load_checkpoint(path)
    try:
        cfg = ModelConfig(**meta["model"])
        stats = TrajectoryStats.from_dict(meta["stats"])
    except (KeyError, TypeError) as exc:
        raise ContractError(f"{path}: checkpoint lacks planner metadata ({exc})") from exc
    model = Planner(cfg, stats, seed=int(meta.get("seed", 0)))
    model.load_state_dict(arrays)
    model.query_meta = meta.get("query_init", model.query_meta)
    return model, meta
