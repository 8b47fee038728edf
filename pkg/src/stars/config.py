"""YAML experiment configuration.

Schema, one mapping per section::

    dataset:    num_classes, dim, n_per_class, spread, seed
    teacher:    hidden, bn_momentum, bn_eps, epochs, lr, momentum, batch_size, seed
    lif:        tau, v_th, v_reset, steps, surrogate_alpha, neuron_model
    synthesis:  lambda_bn, lambda_reg, lambda_rca, lambda_tar, steps, step_size, batch_size,
                quantiles, delta, layer_weights, threshold_mode, fixed_thresholds, tar_norm, init_scale
    distill:    temperature, rounds, kd_steps, lr, momentum, pool_size, ce_weight, init_gain
    experiment: variant, seeds, output_dir, checkpoint
    analysis:   n_samples, n_shift_pairs, seed            (optional)

Every section except ``analysis`` is required; keys inside a section may be
omitted to take the default. Unknown keys are rejected with their full path.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .distill import VARIANTS, DistillConfig
from .errors import ConfigError
from .nets import TeacherTrainConfig
from .snn import LIFConfig
from .synthesis import SynthesisConfig


@dataclass(frozen=True)
class DatasetConfig:
    num_classes: int = 4
    dim: int = 16
    n_per_class: int = 625
    spread: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.dim < 2 or self.n_per_class < 1 or self.spread < 0:
            raise ValueError("need num_classes >= 2, dim >= 2, n_per_class >= 1, spread >= 0")


@dataclass(frozen=True)
class TeacherConfig:
    hidden: tuple[int, ...] = (64, 64)
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    epochs: int = 80
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.hidden or min(self.hidden) < 1:
            raise ValueError("hidden must list at least one positive width")
        if self.epochs < 0 or self.batch_size < 2 or not self.lr > 0:
            raise ValueError("need epochs >= 0, batch_size >= 2, lr > 0")

    def training(self) -> TeacherTrainConfig:
        return TeacherTrainConfig(self.epochs, self.lr, self.momentum, self.batch_size)


@dataclass(frozen=True)
class RunConfig:
    variant: str = "stars"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    output_dir: str = "runs/default"
    checkpoint: str | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {sorted(VARIANTS)}, got {self.variant!r}")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be a non-empty list without repeats")


@dataclass(frozen=True)
class AnalysisConfig:
    n_samples: int = 100_000
    n_shift_pairs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1000 or self.n_shift_pairs < 1:
            raise ValueError("need n_samples >= 1000 and n_shift_pairs >= 1")


SECTIONS = {
    "dataset": DatasetConfig,
    "teacher": TeacherConfig,
    "lif": LIFConfig,
    "synthesis": SynthesisConfig,
    "distill": DistillConfig,
    "experiment": RunConfig,
    "analysis": AnalysisConfig,
}
OPTIONAL = {"analysis"}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    lif: LIFConfig = field(default_factory=LIFConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    experiment: RunConfig = field(default_factory=RunConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    @property
    def checkpoint_path(self) -> Path:
        if self.experiment.checkpoint:
            return Path(self.experiment.checkpoint)
        return Path(self.experiment.output_dir) / "teacher.json"

    def replace(self, **sections) -> "ExperimentConfig":
        return dataclasses.replace(self, **sections)


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def to_dict(cfg: ExperimentConfig) -> dict:
    return {name: {f.name: _plain(getattr(getattr(cfg, name), f.name)) for f in fields(SECTIONS[name])}
            for name in SECTIONS}


def dumps(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def _build_section(name: str, raw) -> object:
    cls = SECTIONS[name]
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section must be a mapping, got {type(raw).__name__}", name)
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown key (expected one of {sorted(known)})", f"{name}.{key}")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), name) from exc


def from_dict(raw) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping", "<root>")
    for key in raw:
        if key not in SECTIONS:
            raise ConfigError(f"unknown section (expected one of {sorted(SECTIONS)})", str(key))
    for name in SECTIONS:
        if name not in raw and name not in OPTIONAL:
            raise ConfigError("missing required section", name)
    return ExperimentConfig(**{name: _build_section(name, raw.get(name)) for name in SECTIONS})


def loads(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML: {exc}", "<root>") from exc
    return from_dict(raw)


def load(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", "<file>")
    return loads(path.read_text())


def bundled(name: str = "default") -> Path:
    """Path of a config shipped with the package (``default`` or ``smoke``)."""
    return Path(__file__).parent / "configs" / f"{name}.yaml"
