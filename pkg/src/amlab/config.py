"""Experiment configuration: one YAML file with nested sections.

Every section is a frozen dataclass, so a parsed config is hashable and can
key caches. Unknown keys are rejected with the dotted path of the offender.
The config hash covers everything except ``out_dir`` and is computed from
canonical JSON, so it does not depend on key order in the file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from amlab.attacks import AttackConfig
from amlab.defense import DefenseConfig
from amlab.errors import ConfigurationError
from amlab.nncore import TrainConfig

TASK_SOURCES = ("synthetic", "idx")
OUTLIER_SOURCES = ("foreign-clusters", "none")
CALIBRATION_MODES = ("fixed", "acceptance", "accuracy-drop")
DEFAULT_TAU_GRID = (0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.95)


@dataclass(frozen=True)
class IdxPaths:
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    surrogate_images: str = ""
    outlier_images: str = ""
    # share of the test file handed to the attacker as the JBDA seed pool
    seed_fraction: float = 0.1

    def __post_init__(self):
        if not 0 < self.seed_fraction < 1:
            raise ConfigurationError("task.idx.seed_fraction must lie strictly between 0 and 1")


@dataclass(frozen=True)
class TaskConfig:
    source: str = "synthetic"
    num_classes: int = 10
    input_dim: int = 20
    cluster_std: float = 0.1
    samples_per_class: int = 100
    test_per_class: int = 100
    seed_pool_per_class: int = 50
    surrogate_shift: float = 4.0
    surrogate_scale: float = 1.0
    outliers: str = "foreign-clusters"
    idx: IdxPaths = field(default_factory=IdxPaths)

    def __post_init__(self):
        if self.source not in TASK_SOURCES:
            raise ConfigurationError(f"task.source must be one of {TASK_SOURCES}")
        if self.outliers not in OUTLIER_SOURCES:
            raise ConfigurationError(f"task.outliers must be one of {OUTLIER_SOURCES}")
        if self.num_classes < 2:
            raise ConfigurationError("task.num_classes must be >= 2")
        for name in ("input_dim", "samples_per_class", "test_per_class", "seed_pool_per_class"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"task.{name} must be >= 1")
        if not self.cluster_std > 0 or not self.surrogate_scale > 0:
            raise ConfigurationError("task.cluster_std and task.surrogate_scale must be > 0")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs: dense nets for vectors, one-conv nets for images."""

    hidden: int = 64
    filters: int = 4
    kernel: int = 5
    stride: int = 2

    def __post_init__(self):
        for name in ("hidden", "filters", "kernel", "stride"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"model.{name} must be >= 1")


@dataclass(frozen=True)
class StageConfig:
    """SGD settings for one training stage; the seed is filled in per run.

    For the defender a positive ``oe_weight`` switches on outlier exposure.
    """

    learning_rate: float = 0.1
    epochs: int = 100
    batch_size: int = 32
    oe_weight: float = 0.0

    def train_config(self, rng_seed: int) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.epochs, self.batch_size, self.oe_weight, rng_seed)

    def __post_init__(self):
        # borrow TrainConfig's checks
        self.train_config(0)


@dataclass(frozen=True)
class CalibrationConfig:
    """How the AM threshold is chosen for single runs.

    ``fixed`` uses ``defense.tau``; ``acceptance`` picks the tau that accepts
    ``benign_acceptance`` of the validation split as in-distribution;
    ``accuracy-drop`` picks the largest tau whose validation accuracy through
    the defense stays within ``max_drop`` of the undefended model.
    """

    mode: str = "fixed"
    benign_acceptance: float = 0.95
    max_drop: float = 0.01

    def __post_init__(self):
        if self.mode not in CALIBRATION_MODES:
            raise ConfigurationError(f"calibration.mode must be one of {CALIBRATION_MODES}")
        if not 0 < self.benign_acceptance <= 1:
            raise ConfigurationError("calibration.benign_acceptance must lie in (0, 1]")
        if not 0 <= self.max_drop <= 1:
            raise ConfigurationError("calibration.max_drop must lie in [0, 1]")


@dataclass(frozen=True)
class SweepConfig:
    defenses: tuple = ("am", "pp")
    attacks: tuple = ("knockoff", "jbda")
    tau: tuple = DEFAULT_TAU_GRID
    alpha_pp: tuple = (0.0, 0.1, 0.2, 0.3, 0.4, 0.45, 0.5)
    dp_magnitude: tuple = (0.0, 0.25, 0.5, 1.0)
    seeds: int = 3
    accuracy_floor: float | None = None

    def __post_init__(self):
        for d in self.defenses:
            if d not in ("am", "pp", "dp"):
                raise ConfigurationError(f"sweep.defenses: unknown defense {d!r}")
        for a in self.attacks:
            if a not in ("knockoff", "jbda"):
                raise ConfigurationError(f"sweep.attacks: unknown attack {a!r}")
        if self.seeds < 1:
            raise ConfigurationError("sweep.seeds must be >= 1")
        if self.accuracy_floor is not None and not 0 <= self.accuracy_floor <= 1:
            raise ConfigurationError("sweep.accuracy_floor must lie in [0, 1]")

    def grid(self, defense_kind: str) -> tuple:
        return {"am": self.tau, "pp": self.alpha_pp, "dp": self.dp_magnitude}[defense_kind]


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    defender: StageConfig = field(default_factory=lambda: StageConfig(oe_weight=0.5))
    misinformer: StageConfig = field(default_factory=StageConfig)
    clone: StageConfig = field(default_factory=lambda: StageConfig(epochs=200))
    defense: DefenseConfig = field(default_factory=lambda: DefenseConfig(kind="am", tau=0.85))
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    out_dir: str = "runs"
    rng_seed: int = 0

    def __post_init__(self):
        if self.rng_seed < 0:
            raise ConfigurationError("rng_seed must be a non-negative integer")
        if self.defender.oe_weight > 0 and self.task.source == "synthetic" and self.task.outliers == "none":
            raise ConfigurationError("defender.oe_weight > 0 needs an outlier source (task.outliers)")
        if self.defender.oe_weight > 0 and self.task.source == "idx" and not self.task.idx.outlier_images:
            raise ConfigurationError("defender.oe_weight > 0 needs task.idx.outlier_images")

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def config_hash(self) -> str:
        body = self.to_dict()
        body.pop("out_dir")
        text = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.config_hash()[:12]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, rng_seed=seed)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(value, annotation, path: str):
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if annotation is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{path}: expected a list, got {type(value).__name__}")
        return tuple(value)
    if dataclasses.is_dataclass(annotation):
        return _build(annotation, value, path)
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path}: expected true/false, got {value!r}")
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path}: expected an integer, got {value!r}")
        return value
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data, path: str = ""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            where = f"{path}.{key}" if path else str(key)
            raise ConfigurationError(f"unknown config key {where!r}")
    kwargs = {}
    for name, value in data.items():
        where = f"{path}.{name}" if path else name
        kwargs[name] = _coerce(value, hints[name], where)
    try:
        return cls(**kwargs)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{path or 'config'}: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data)


def load_config(path) -> ExperimentConfig:
    """Parse a YAML config file; a missing or empty file section keeps its defaults."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"config file {str(path)!r} does not exist") from None
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: not valid YAML ({exc})") from None
    return config_from_dict(data or {})


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)
