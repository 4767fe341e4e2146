"""Run configuration document (JSON, or TOML when ``tomli`` is available).

Unknown keys and wrongly typed values are rejected before anything runs.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .data import MaskSpec
from .errors import ConfigError
from .model import ModelConfig
from .train import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    train: Optional[str] = None  # directory with a manifest; None -> synthetic benchmark data
    val: Optional[str] = None
    test: Optional[str] = None
    manifest: str = "manifest.tsv"
    labels_csv: Optional[str] = None  # precomputed sparse labels; None -> sample now
    budget_fraction: float = 0.0005
    stratified: bool = True
    # synthetic benchmark (used when train is None)
    synth_train_images: int = 8
    synth_test_images: int = 2
    synth_val_images: int = 0
    synth_side: int = 256
    synth_noise_std: float = 0.05
    synth_cells: int = 8

    def __post_init__(self):
        if not 0 < self.budget_fraction <= 1:
            raise ConfigError(f"budget_fraction must be in (0, 1], got {self.budget_fraction}")


@dataclass(frozen=True)
class InferenceConfig:
    stride: int = 1
    inference_mask: bool = False
    batch_size: int = 1024


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mask: MaskSpec = field(default_factory=MaskSpec)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=seed, train=dataclasses.replace(self.train, seed=seed))

    def to_json(self) -> dict:
        return _to_plain(self)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def _check_type(path: str, value: Any, hint) -> Any:
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_type(path, value, inner[0])
    if hint is bool:
        ok = isinstance(value, bool)
    elif hint is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif hint is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif hint is str:
        ok = isinstance(value, str)
    elif hint is tuple or origin is tuple:
        ok = isinstance(value, (list, tuple))
        value = tuple(value) if ok else value
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {getattr(hint, '__name__', hint)}, got {value!r}")
    return value


def from_dict(cls, data: Any, path: str = ""):
    """Build dataclass ``cls`` from nested dicts, rejecting unknown keys."""
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{path or cls.__name__}: expected a table, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path or cls.__name__}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        sub = f"{path}.{key}" if path else key
        if dataclasses.is_dataclass(hint):
            kwargs[key] = from_dict(hint, value, sub)
        else:
            kwargs[key] = _check_type(sub, value, hint)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix == ".toml":
            import tomli

            raw = tomli.loads(text)
        else:
            raw = json.loads(text)
    except ImportError as exc:
        raise ConfigError("TOML configs need the 'tomli' package; use JSON instead") from exc
    except ValueError as exc:
        raise ConfigError(f"{path}: cannot parse ({exc})") from exc
    return from_dict(RunConfig, raw)


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Override dotted keys, e.g. {"train.steps": 10, "mask.side": 5}."""
    raw = cfg.to_json()
    for dotted, value in overrides.items():
        node = raw
        keys = dotted.split(".")
        for k in keys[:-1]:
            if k not in node or not isinstance(node[k], dict):
                raise ConfigError(f"unknown config section {dotted!r}")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[keys[-1]] = value
    return from_dict(RunConfig, raw)


def model_config_from_json(d: dict) -> ModelConfig:
    return from_dict(ModelConfig, d, "model")


def train_config_from_json(d: dict) -> TrainConfig:
    return from_dict(TrainConfig, d, "train")
