"""Run configuration: one TOML document, strict about unknown keys."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from .inference import MatchConfig
from .metrics import EvalConfig
from .model import LossThresholds, TrainConfig
from .sampler import parse_group
from .transformer import TransformerConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    dir: str = "data"
    mode: str = "rescale"
    T: int = 100
    window_stride: int = 128
    n_videos: int = 20
    video_length: int = 100
    channels: int = 16
    seconds_per_snippet: float = 1.0
    amplitude: float = 2.0

    def __post_init__(self):
        if self.mode not in ("rescale", "window"):
            raise ConfigError(f"data.mode must be 'rescale' or 'window', got {self.mode!r}")


@dataclass
class SamplerConfig:
    window_group: str = "fib:100:21"
    sample_points: int = 32

    def __post_init__(self):
        parse_group(self.window_group)


@dataclass
class PathsConfig:
    checkpoint: str = "run/model.tapg"
    loss_log: str = "run/loss.jsonl"
    results: str = "run/results.json"
    report: str = "run/report.json"
    plot: str = "run/ar_an.svg"


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    model: TransformerConfig = field(default_factory=TransformerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: MatchConfig = field(default_factory=MatchConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    base_dir: Path = field(default=Path("."), repr=False)

    def path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p


_SECTIONS = {
    "data": DataConfig,
    "sampler": SamplerConfig,
    "model": TransformerConfig,
    "train": TrainConfig,
    "inference": MatchConfig,
    "eval": EvalConfig,
    "paths": PathsConfig,
}


def _build(cls, values: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    values = dict(values)
    if cls is TrainConfig and "thresholds" in values:
        values["thresholds"] = _build(LossThresholds, values["thresholds"], "train.thresholds")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def from_dict(doc: dict, base_dir: Path = Path(".")) -> RunConfig:
    unknown = sorted(set(doc) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {name: _build(cls, doc.get(name, {}), name) for name, cls in _SECTIONS.items()}
    return RunConfig(seed=int(doc.get("seed", 0)), base_dir=base_dir, **kwargs)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(doc, path.parent)
