"""Strict JSON experiment configuration.

Every run is described by one JSON file with fixed sections; unknown keys
are rejected so a typo cannot silently fall back to a default. The fully
resolved config (defaults applied) is written next to every run's outputs,
making runs reproducible from their artifacts alone.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from barrier_ext.barriers import ConstraintHandlerKind
from barrier_ext.constraints import ConstraintSetting


class ConfigError(ValueError):
    """Malformed, unknown, or inconsistent configuration input."""


@dataclass
class DatasetSection:
    root: str = "data/synth"
    n_train: int = 1000
    n_val: int = 100
    image_size: int = 64
    radius: int = 10
    dark: float = 0.3
    bright: float = 0.7
    background: float = 1.0
    noise_sigmas: tuple[float, ...] = (0.0, 0.03, 0.06)
    seed: int = 0


@dataclass
class ModelSection:
    hidden_width: int = 16
    temperature: float = 5.0


@dataclass
class ConstraintsSection:
    setting: str = "size_and_centroid"
    size_factors: tuple[float, float] = (0.9, 1.1)
    centroid_margin: float = 20.0
    normalize_size: bool = False


@dataclass
class MethodSection:
    kind: str = "log_barrier_extension"
    t0: float = 5.0
    mu: float = 1.1
    constraint_weight: float = 1.0
    dual_lr: float = 1e-3


@dataclass
class OptimizerSection:
    method: str = "adam"
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 200
    batch_size: int = 1
    seed: int = 0
    plateau_patience: int | None = 20


@dataclass
class OutputSection:
    dir: str = "runs/out"
    record_wall_time: bool = False


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    constraints: ConstraintsSection = field(default_factory=ConstraintsSection)
    method: MethodSection = field(default_factory=MethodSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    output: OutputSection = field(default_factory=OutputSection)

    def handler_kind(self) -> ConstraintHandlerKind:
        return ConstraintHandlerKind(self.method.kind)

    def constraint_setting(self) -> ConstraintSetting:
        return ConstraintSetting(self.constraints.setting)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_TUPLE_FIELDS = {"noise_sigmas", "size_factors"}


def _build_section(cls, data: dict, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in section {section!r}: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{section}.{key} must be a list")
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad section {section!r}: {exc}") from exc


_SECTIONS = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "constraints": ConstraintsSection,
    "method": MethodSection,
    "optimizer": OptimizerSection,
    "output": OutputSection,
}


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be an object, got {type(data).__name__}")
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level sections: {sorted(unknown)}")
    cfg = ExperimentConfig(
        **{name: _build_section(cls, data.get(name, {}), name) for name, cls in _SECTIONS.items()}
    )
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    try:
        cfg.handler_kind()
    except ValueError:
        valid = sorted(k.value for k in ConstraintHandlerKind)
        raise ConfigError(f"unknown method kind {cfg.method.kind!r}; expected one of {valid}") from None
    try:
        cfg.constraint_setting()
    except ValueError:
        valid = sorted(s.value for s in ConstraintSetting)
        raise ConfigError(
            f"unknown constraint setting {cfg.constraints.setting!r}; expected one of {valid}"
        ) from None
    if cfg.method.t0 <= 0.0:
        raise ConfigError(f"method.t0 must be positive, got {cfg.method.t0}")
    if cfg.method.mu <= 1.0:
        raise ConfigError(f"method.mu must exceed 1, got {cfg.method.mu}")
    if cfg.method.dual_lr <= 0.0:
        raise ConfigError(f"method.dual_lr must be positive, got {cfg.method.dual_lr}")
    if cfg.optimizer.method not in ("sgd", "adam"):
        raise ConfigError(f"optimizer.method must be 'sgd' or 'adam', got {cfg.optimizer.method!r}")
    if cfg.optimizer.learning_rate <= 0.0:
        raise ConfigError("optimizer.learning_rate must be positive")
    if cfg.optimizer.epochs < 0:
        raise ConfigError("optimizer.epochs must be nonnegative")
    if cfg.optimizer.batch_size < 1:
        raise ConfigError("optimizer.batch_size must be at least 1")
    if cfg.constraints.size_factors[0] > cfg.constraints.size_factors[1]:
        raise ConfigError("constraints.size_factors must be ordered (low, high)")


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def write_resolved(cfg: ExperimentConfig, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.resolved.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
