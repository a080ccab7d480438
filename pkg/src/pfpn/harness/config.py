"""JSON experiment configuration with a closed schema.

Schema (every key optional except ``env.name`` and ``head.variant``)::

    {
      "env":      {"name": "bandit1d" | "banditNd" | "pointmass2g",
                   "dims": int, "horizon": int, "reset_noise": float},
      "head":     {"variant": "pfpn" | "gaussian" | "discrete" | "gmm",
                   "n": int, "hidden": [int, ...], "init_std": float, "output_scale": float},
      "trainer":  {... fields of pfpn.trainer.TrainerConfig ...},
      "resample": {... fields of pfpn.resampling.ResampleConfig ...},
      "eval":     {"episodes": int, "every": int},
      "seed": int, "output_dir": str, "workers": int
    }

Unknown keys and wrongly typed values are rejected with the dotted key path.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from ..envs import ENV_NAMES
from ..policy import VARIANTS
from ..resampling import ResampleConfig
from ..trainer import TrainerConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


@dataclass
class EnvConfig:
    name: str = ""
    dims: int = 1
    horizon: int = 100
    reset_noise: float = 0.0


@dataclass
class HeadConfig:
    variant: str = ""
    n: int = 35
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    init_std: float = 0.5
    output_scale: float = 0.01


@dataclass
class EvalConfig:
    episodes: int = 10
    every: int = 1


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    resample: ResampleConfig = field(default_factory=ResampleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    output_dir: str = ""
    workers: int = 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _coerce(tp, value, key):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(key, f"expected an object, got {type(value).__name__}")
        return _build(tp, value, key)
    if origin is list:
        (item,) = typing.get_args(tp)
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list of {_type_name(item)}, got {type(value).__name__}")
        return [_coerce(item, v, f"{key}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected bool, got {type(value).__name__}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected int, got {type(value).__name__}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected float, got {type(value).__name__}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected str, got {type(value).__name__}")
        return value
    raise ConfigError(key, f"unsupported schema type {tp!r}")


def _build(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{prefix}{'.' if prefix else ''}{key}", "unknown key")
    kwargs = {}
    for name in names:
        if name in data:
            path = f"{prefix}{'.' if prefix else ''}{name}"
            kwargs[name] = _coerce(hints[name], data[name], path)
    return cls(**kwargs)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.env.name not in ENV_NAMES:
        raise ConfigError("env.name", f"expected one of {ENV_NAMES}, got {cfg.env.name!r}")
    if cfg.head.variant not in VARIANTS:
        raise ConfigError("head.variant", f"expected one of {VARIANTS}, got {cfg.head.variant!r}")
    if cfg.head.n < 1:
        raise ConfigError("head.n", "must be >= 1")
    if not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed", "must be a non-negative 64-bit integer")
    if cfg.workers < 1:
        raise ConfigError("workers", "must be >= 1")
    for section, obj, n in (("trainer", cfg.trainer, None), ("resample", cfg.resample, cfg.head.n)):
        try:
            obj.validate(n) if n is not None else obj.validate()
        except ValueError as exc:
            raise ConfigError(section, str(exc)) from exc
    return cfg


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "expected a JSON object")
    for required in ("env", "head"):
        if required not in data:
            raise ConfigError(required, "missing required section")
    return validate(_build(ExperimentConfig, data))


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` strings; values are parsed as JSON when possible."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(item, "override must look like dotted.key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(key, "cannot descend into a non-object")
        node[parts[-1]] = _parse_value(text)
    return data


def load_config(path, overrides=None) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
    return config_from_dict(apply_overrides(data, overrides))


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
