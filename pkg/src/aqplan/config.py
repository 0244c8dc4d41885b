"""Single JSON run configuration with dotted-path overrides.

Every nested section is checked up front; errors name the offending field
(``train.rl.group_size: must be >= 2``) and are collected rather than raised
one at a time.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .errors import ContractError
from .model import ModelConfig
from .rewards import RewardConfig
from .training import RLConfig, SFTConfig, TrainConfig


class ConfigError(ContractError):
    """Schema or value problems in a run configuration (reported with field paths)."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid run config:\n  " + "\n  ".join(self.problems))


@dataclass
class DataConfig:
    corpus: str | None = None  # JSON-lines corpus; None means generate synthetic clips
    synth_count: int = 2000
    synth_seed: int = 0
    val_fraction: float = 0.1


@dataclass
class EvalConfig:
    n_per_kind: int = 4
    replan_hz: float = 2.0
    scenario_seed: int = 0
    plot_clips: int = 4
    lane_offset: float = 3.5


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    dt: float = 0.5
    output_dir: str = "runs/default"
    threads: int = 1

    @property
    def horizon(self) -> int:
        return self.model.horizon

    def problems(self) -> list[str]:
        errs = []
        errs += self.model.validate("model")
        errs += self.reward.problems("reward")
        errs += self.train.problems("train")
        d = self.data
        if d.corpus is not None and not Path(d.corpus).exists():
            errs.append(f"data.corpus: file not found: {d.corpus}")
        if d.corpus is None and d.synth_count < 2:
            errs.append("data.synth_count: must be >= 2")
        if not 0 < d.val_fraction < 1:
            errs.append("data.val_fraction: must lie in (0, 1)")
        if self.dt <= 0:
            errs.append("dt: must be > 0")
        elif abs(self.dt - self.reward.dt) > 1e-12:
            errs.append("reward.dt: must equal dt")
        if self.model.horizon * self.dt < 3.0 - 1e-9:
            errs.append("model.horizon: horizon * dt must cover 3 s for the L2 metrics")
        if self.eval.n_per_kind < 1:
            errs.append("eval.n_per_kind: must be >= 1")
        if self.eval.replan_hz <= 0:
            errs.append("eval.replan_hz: must be > 0")
        if self.threads < 1:
            errs.append("threads: must be >= 1")
        return errs

    def validate(self) -> "RunConfig":
        # the top-level seed and data split drive training
        self.train.seed = self.seed
        self.train.val_fraction = self.data.val_fraction
        errs = self.problems()
        if errs:
            raise ConfigError(errs)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "reward": RewardConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "train.sft": SFTConfig,
    "train.rl": RLConfig,
}


def _build(cls, raw: Any, path: str, errs: list[str]):
    if not isinstance(raw, dict):
        errs.append(f"{path or '<root>'}: expected an object")
        return None
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        p = f"{path}.{key}" if path else key
        if key not in known:
            errs.append(f"{p}: unknown field")
            continue
        sub = _SECTIONS.get(p)
        if sub is not None:
            built = _build(sub, value, p, errs)
            if built is not None:
                kwargs[key] = built
            continue
        default = getattr(cls(), key)
        problem = _type_problem(value, default, key == "corpus")
        if problem:
            errs.append(f"{p}: {problem}")
            continue
        kwargs[key] = float(value) if isinstance(default, float) and not isinstance(value, bool) else value
    try:
        return cls(**kwargs)
    except ContractError as exc:
        # RewardConfig validates itself; re-report with the section path
        errs.extend(str(exc).split("; "))
        return None


def _type_problem(value, default, nullable: bool) -> str | None:
    if value is None:
        return None if nullable else "must not be null"
    if isinstance(default, bool):
        return None if isinstance(value, bool) else "expected true/false"
    if isinstance(default, int):
        return None if isinstance(value, int) and not isinstance(value, bool) else "expected an integer"
    if isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        return None if ok else "expected a number"
    if isinstance(default, list):
        return None if isinstance(value, list) else "expected a list"
    if isinstance(default, str) or nullable:
        return None if isinstance(value, str) else "expected a string"
    return None


def config_from_dict(raw: dict) -> RunConfig:
    errs: list[str] = []
    cfg = _build(RunConfig, raw, "", errs)
    if errs or cfg is None:
        raise ConfigError(errs or ["<root>: could not build config"])
    return cfg.validate()


def parse_override(text: str) -> tuple[list[str], Any]:
    """``train.sft.lr=1e-3`` -> (["train", "sft", "lr"], 0.001); values parse as JSON, else string."""
    if "=" not in text:
        raise ConfigError([f"{text}: override must look like key.path=value"])
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    raw = json.loads(json.dumps(raw))
    for text in overrides:
        keys, value = parse_override(text)
        node = raw
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError([f"{'.'.join(keys)}: cannot descend into a scalar"])
        node[keys[-1]] = value
    return raw


def load_run_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError([f"<root>: not valid JSON ({exc})"]) from exc
    return config_from_dict(apply_overrides(raw, overrides or []))
