"""Flat ``section.key = value`` run configuration.

Sections map onto the dataclasses that own the settings:

    dataset.*  -> SyntheticSpec
    train.*    -> TrainConfig
    model.*    -> ModelConfig (dimensions tied to the corpus/train settings excluded)
    eval.*     -> EvalConfig
    run.*      -> RunPaths
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .dataset import SyntheticSpec
from .model import ModelConfig
from .training import TrainConfig

MODEL_DERIVED = {"input_dim", "fusion_layers", "num_graphs", "init_seed"}


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    thresholds: tuple[float, ...] = (0.5, 0.6, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)
    baseline: str = "none"
    proposals_file: str = ""

    def validate(self) -> None:
        if self.baseline not in ("none", "chance", "frame"):
            raise ConfigError(f"eval.baseline: expected chance|frame|none, got {self.baseline!r}")
        if not self.thresholds or any(not 0.0 <= t <= 1.0 for t in self.thresholds):
            raise ConfigError("eval.thresholds: need values in [0, 1]")


@dataclass
class RunPaths:
    corpus: str = ""
    out: str = "out"
    checkpoint: str = ""


@dataclass
class RunConfig:
    dataset: SyntheticSpec = field(default_factory=SyntheticSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunPaths = field(default_factory=RunPaths)

    def sections(self):
        return {"dataset": self.dataset, "train": self.train, "model": self.model,
                "eval": self.eval, "run": self.run}

    def set(self, key: str, raw: str) -> None:
        section, _, name = key.strip().partition(".")
        target = self.sections().get(section)
        if target is None or not name or (section == "model" and name in MODEL_DERIVED):
            raise ConfigError(f"unknown config key {key!r}")
        known = {f.name: f for f in fields(target)}
        if name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(target, name)
        try:
            value = _parse(raw.strip(), current)
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from None
        setattr(target, name, value)

    def items(self):
        for section, obj in self.sections().items():
            for f in fields(obj):
                if section == "model" and f.name in MODEL_DERIVED:
                    continue
                yield f"{section}.{f.name}", getattr(obj, f.name)

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]

    def validate(self) -> None:
        try:
            self.dataset.validate()
            self.train.validate()
            self.eval.validate()
            ModelConfig(**{f.name: getattr(self.model, f.name) for f in fields(self.model)})
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def _parse(raw: str, current):
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if isinstance(current, tuple):
        elem = type(current[0]) if current else int
        parts = [p for p in raw.replace(" ", "").split(",") if p]
        return tuple(elem(p) for p in parts)
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str, config: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    config = config or RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}: line {lineno}: expected 'key = value'")
        try:
            config.set(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}: line {lineno}: {exc}") from None
    return config


def load_config(path, config: RunConfig | None = None) -> RunConfig:
    return parse_config_text(Path(path).read_text(), config, str(path))
