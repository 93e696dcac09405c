"""Run configuration: nested dataclasses, loaded from YAML/JSON with strict keys."""

from __future__ import annotations

import json
import types
import typing
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError
from .federation import FederationConfig
from .model import ModelConfig

BENCHMARK_HORIZONS = (96, 192, 336, 720)
LOOKBACK_GRID = (24, 48, 96, 192, 336, 720)


@dataclass(frozen=True)
class DataConfig:
    path: str = ""  # empty selects the bundled 200-row synthetic series
    split_ratio: float = 0.8
    standardize: bool = True  # z-score every channel with training-split statistics
    expect_channels: int = 0  # 0 skips the shape check
    expect_rows: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "federated"
    horizons: tuple[int, ...] = BENCHMARK_HORIZONS
    lookbacks: tuple[int, ...] = LOOKBACK_GRID
    sweep_horizon: int = 720
    centralized_epochs: int = 200
    target_tolerance: float = 0.05  # "converged" = within this fraction of the best test MSE

    def __post_init__(self):
        object.__setattr__(self, "horizons", tuple(self.horizons))
        object.__setattr__(self, "lookbacks", tuple(self.lookbacks))
        if self.mode not in ("federated", "centralized"):
            raise ConfigError("mode must be 'federated' or 'centralized'", key="experiment.mode")
        if any(h < 1 for h in self.horizons) or any(v < 1 for v in self.lookbacks):
            raise ConfigError("horizons and lookbacks must be positive", key="experiment.horizons")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    output_dir: str = "runs/latest"
    verbosity: int = 1

    def to_dict(self) -> dict:
        return _plain(asdict(self))


SECTIONS = {"data": DataConfig, "model": ModelConfig, "federation": FederationConfig, "experiment": ExperimentConfig}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(value: Any, hint, key: str):
    """Check/convert one config value against its annotation."""
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        errors = []
        for arm in typing.get_args(hint):
            if arm is type(None):
                if value is None:
                    return None
                continue
            try:
                return _coerce(value, arm, key)
            except ConfigError as exc:
                errors.append(exc)
        raise errors[0] if errors else ConfigError(f"{key}: bad value {value!r}", key=key)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}", key=key)
        args = typing.get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], key) for v in value)
        return tuple(value)
    if hint is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected true/false, got {value!r}", key=key)
    if hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected an integer, got {value!r}", key=key)
    if hint is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{key}: expected a number, got {value!r}", key=key)
    if hint is str:
        if isinstance(value, str):
            return value
        raise ConfigError(f"{key}: expected a string, got {value!r}", key=key)
    return value


def _build(cls, values: Mapping, prefix: str):
    if not isinstance(values, Mapping):
        raise ConfigError(f"{prefix}: expected a mapping, got {type(values).__name__}", key=prefix)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    for k in values:
        if k not in names:
            raise ConfigError(f"unknown config key {prefix}.{k}", key=f"{prefix}.{k}")
    kwargs = {k: _coerce(v, hints[k], f"{prefix}.{k}") for k, v in values.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{prefix}: {exc}", key=prefix) from None


def from_dict(d: Mapping) -> RunConfig:
    if not isinstance(d, Mapping):
        raise ConfigError("config root must be a mapping")
    allowed = {f.name for f in fields(RunConfig)}
    for k in d:
        if k not in allowed:
            raise ConfigError(f"unknown config key {k}", key=str(k))
    if "seed" not in d or d["seed"] is None:
        raise ConfigError("the root seed is required; set 'seed' explicitly", key="seed")
    kwargs = {"seed": _coerce(d["seed"], int, "seed")}
    for name, cls in SECTIONS.items():
        if name in d:
            kwargs[name] = _build(cls, d[name] or {}, name)
    for k in ("output_dir", "verbosity"):
        if k in d:
            kwargs[k] = _coerce(d[k], typing.get_type_hints(RunConfig)[k], k)
    return RunConfig(**kwargs)


def read_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist", key="config")
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}", key="config") from None
    return data or {}


def load(path) -> RunConfig:
    return from_dict(read_file(path))


def apply_overrides(d: Mapping, assignments: list[str]) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars or lists."""
    out = json.loads(json.dumps(_plain(dict(d))))
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value", key=item)
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw) if raw.strip() else ""
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {key}: {p} is not a section", key=key)
        node[parts[-1]] = value
    return out


def defaults_table() -> list[tuple[str, Any]]:
    """Every config key with its default, in declaration order."""
    rows: list[tuple[str, Any]] = [("seed", "(required)")]
    for name, cls in SECTIONS.items():
        for f in fields(cls):
            if f.default is not MISSING:
                default = f.default
            else:
                default = f.default_factory()  # type: ignore[misc]
            rows.append((f"{name}.{f.name}", _plain(default)))
    for f in fields(RunConfig):
        if f.name not in SECTIONS and f.name != "seed":
            rows.append((f.name, f.default))
    return rows


def with_channels(cfg: RunConfig, n_channels: int) -> RunConfig:
    return replace(cfg, model=replace(cfg.model, n_channels=n_channels))


def dump(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=False)
