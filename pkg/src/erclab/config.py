"""Experiment configuration (JSON) with strict, field-by-field validation.

Unknown keys are rejected at every nesting level. Relative paths are
resolved against the directory of the config file.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from erclab.attention import AttentionConfig
from erclab.context import ContextConfig
from erclab.errors import ConfigError
from erclab.losses import LossConfig

PIPELINES = ("hcam", "mister", "care_head")
SELECTION_METRICS = ("weighted_f1", "macro_f1")


@dataclass
class OptimConfig:
    optimizer: str = "adamw"
    learning_rate: float = 1e-5
    batch_size: int = 8
    epochs: int = 100
    grad_clip: float | None = 0.25
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.optimizer not in ("adamw", "adam"):
            raise ConfigError(f"optim.optimizer must be 'adamw' or 'adam', got {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ConfigError("optim.learning_rate must be > 0")
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ConfigError("optim.batch_size and optim.epochs must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("optim.grad_clip must be > 0 or null")
        if self.weight_decay < 0:
            raise ConfigError("optim.weight_decay must be >= 0")


@dataclass
class HcamOptions:
    embed_dim: int = 64
    joint: bool = False

    def __post_init__(self):
        if self.embed_dim <= 0:
            raise ConfigError("hcam.embed_dim must be positive")


@dataclass
class MisterOptions:
    monolithic: bool = False


@dataclass
class CareOptions:
    modality: str = "layers"
    n_layers: int = 1
    hidden_dim: int = 256
    tile: int = 1

    def __post_init__(self):
        if self.n_layers < 1 or self.hidden_dim < 1 or self.tile < 1:
            raise ConfigError("care.n_layers, care.hidden_dim and care.tile must be positive")


@dataclass
class ExperimentConfig:
    pipeline: str
    manifest: str
    output_dir: str
    modalities: list[str] = field(default_factory=lambda: ["speech", "text"])
    seed: int = 0
    selection_metric: str = "weighted_f1"
    loss: LossConfig = field(default_factory=LossConfig)
    context: ContextConfig = field(default_factory=ContextConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    hcam: HcamOptions = field(default_factory=HcamOptions)
    mister: MisterOptions = field(default_factory=MisterOptions)
    care: CareOptions = field(default_factory=CareOptions)

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"pipeline must be one of {PIPELINES}, got {self.pipeline!r}")
        if self.selection_metric not in SELECTION_METRICS:
            raise ConfigError(f"selection_metric must be one of {SELECTION_METRICS}, got {self.selection_metric!r}")
        if self.pipeline == "hcam" and self.loss.beta_hcam is None:
            raise ConfigError("loss.beta_hcam is required for pipeline 'hcam' (no default)")
        if self.pipeline in ("hcam", "mister") and len(self.modalities) != 2:
            raise ConfigError(f"pipeline {self.pipeline!r} needs exactly 2 modalities (speech, text), "
                              f"got {self.modalities}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def resolved_path(self, name: str, base: Path | None = None) -> Path:
        p = Path(getattr(self, name))
        return p if p.is_absolute() or base is None else base / p


def _from_dict(cls, data: Any, where: str):
    label = where or "config"
    if not isinstance(data, dict):
        raise ConfigError(f"{label}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{label}: unknown key(s) {unknown}")
    missing = [n for n, f in known.items()
               if n not in data and f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING]
    if missing:
        raise ConfigError(f"{label}: missing required field(s) {missing}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(hints[name], value, f"{where}.{name}" if where else name)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{label}: {exc}") from None


def _coerce(tp, value, where):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        return _from_dict(tp, value, where)
    if origin is typing.Union or type(tp).__name__ == "UnionType":
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        return [_coerce(args[0], v, f"{where}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def config_from_dict(data: dict) -> ExperimentConfig:
    return _from_dict(ExperimentConfig, data, "")


def load_config(path) -> tuple[ExperimentConfig, Path]:
    """Parse a config file; returns the config and its base directory."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return config_from_dict(data), path.parent
