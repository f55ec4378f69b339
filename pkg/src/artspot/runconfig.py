"""Strict JSON run configuration: model, synthetic data and schedule sections."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .spotter.config import SpotterConfig, canonical_mode
from .spotter.training import Schedule
from .synth import SynthSpec


@dataclass
class TrainSection:
    steps: int = 3000
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 2
    warmup: int = 100
    decay_at: list = field(default_factory=lambda: [0.7, 0.9])
    clip_norm: float = 10.0
    mode: str = "joint"
    seed: int = 0
    init_seed: int = 0

    def schedule(self) -> Schedule:
        return Schedule(self.steps, self.lr, self.momentum, self.batch_size, self.warmup,
                        tuple(self.decay_at), self.clip_norm)


@dataclass
class PathsSection:
    train_data: str | None = None
    eval_data: str | None = None
    out_dir: str | None = None


@dataclass
class RunConfig:
    spotter: SpotterConfig = field(default_factory=SpotterConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    train: TrainSection = field(default_factory=TrainSection)
    paths: PathsSection = field(default_factory=PathsSection)
    base_dir: Path = field(default_factory=Path.cwd)

    def resolve(self, p) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else (self.base_dir / p)

    def to_json(self) -> dict:
        def section(obj):
            d = dataclasses.asdict(obj)
            return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

        sp = section(self.spotter)
        sp["levels"] = [[s, lo, None if math.isinf(hi) else hi] for s, lo, hi in self.spotter.levels]
        return {"spotter": sp, "synth": section(self.synth), "train": section(self.train),
                "paths": section(self.paths)}


_SECTIONS = {"spotter": SpotterConfig, "synth": SynthSpec, "train": TrainSection, "paths": PathsSection}
_TUPLE_FIELDS = {"image_size", "instances_per_image", "text_len", "height_px", "rotation"}


def _build(cls, name, values):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    kw = dict(values)
    if cls is SpotterConfig and "levels" in kw:
        try:
            kw["levels"] = [[int(s), float(lo), math.inf if hi is None else float(hi)] for s, lo, hi in kw["levels"]]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"levels must be [stride, lo, hi|null] triples: {exc}") from exc
    if cls is SynthSpec:
        for k in _TUPLE_FIELDS & set(kw):
            kw[k] = tuple(kw[k])
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad values in {name!r}: {exc}") from exc


def parse_run_config(doc: dict, base_dir=None) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    parts = {k: _build(cls, k, doc.get(k, {})) for k, cls in _SECTIONS.items()}
    cfg = RunConfig(**parts, base_dir=Path(base_dir) if base_dir else Path.cwd())
    cfg.spotter.validate()
    cfg.synth.validate()
    cfg.train.mode = canonical_mode(cfg.train.mode)
    if cfg.train.steps < 0 or cfg.train.batch_size < 1:
        raise ConfigError("train.steps must be >= 0 and train.batch_size >= 1")
    return cfg


def load_run_config(path=None) -> RunConfig:
    """Read a config file; ``None`` gives the built-in desk defaults."""
    if path is None:
        return parse_run_config({})
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_run_config(doc, base_dir=path.resolve().parent)
