"""Run configuration: flat ``section.key = value`` text, validated and filled with defaults."""
from __future__ import annotations

import dataclasses
import json
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .env import EnvConfig
from .geometry import GeometryError, IntersectionLayout


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    hidden_layers: int = 2
    hidden_units: int = 128
    sigma_min: float = 0.01
    adam_eps: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999

    @property
    def hidden(self) -> tuple[int, ...]:
        return (self.hidden_units,) * self.hidden_layers


@dataclass(frozen=True)
class TrainConfig:
    algo: str = "mappo"
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    total_timesteps: int = 50_000_000
    model_iterations: int = 1
    batch_size: int = 2048
    minibatch_size: int = 64
    epochs: int = 10
    lr_start: float = 3e-4
    lr_end: float = 0.0
    workers: int = 16
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    model_horizon: int = 2048
    imagination_restart: str = "reset"
    normalize_advantages: bool = True
    entropy_coef: float = 0.0
    value_clip: bool = False
    max_grad_norm: float = 0.0


@dataclass(frozen=True)
class RunOptions:
    out_dir: str = "runs"
    deterministic: bool = True
    checkpoint_every: int = 10


@dataclass(frozen=True)
class RunConfig:
    layout: IntersectionLayout = field(default_factory=IntersectionLayout)
    env: EnvConfig = field(default_factory=EnvConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunOptions = field(default_factory=RunOptions)

    def replace(self, **sections) -> "RunConfig":
        """``cfg.replace(train={"workers": 4})`` returns a validated copy."""
        updated = {}
        for name, changes in sections.items():
            updated[name] = dataclasses.replace(getattr(self, name), **changes)
        cfg = dataclasses.replace(self, **updated)
        validate(cfg)
        return cfg


SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(RunConfig)}


def _hints(cls):
    return typing.get_type_hints(cls)


def _coerce(key: str, value, hint):
    origin = typing.get_origin(hint)
    if origin is tuple:
        item = typing.get_args(hint)[0]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {type(value).__name__}")
        return tuple(_coerce(f"{key}[{i}]", v, item) for i, v in enumerate(value))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported field type {hint}")


def from_mapping(data: dict) -> RunConfig:
    sections = {}
    for name, value in data.items():
        if name not in SECTIONS:
            raise ConfigError(f"{name}: unknown config section")
        if not isinstance(value, dict):
            raise ConfigError(f"{name}: expected dotted keys under section {name!r}")
    for name, factory in SECTIONS.items():
        cls = type(factory())
        hints = _hints(cls)
        values = {}
        for key, value in data.get(name, {}).items():
            path = f"{name}.{key}"
            if key not in hints:
                raise ConfigError(f"{path}: unknown config key")
            if isinstance(value, dict):
                raise ConfigError(f"{path}: unexpected nested table")
            values[key] = _coerce(path, value, hints[key])
        sections[name] = cls(**values)
    cfg = RunConfig(**sections)
    validate(cfg)
    return cfg


def _check(cond: bool, key: str, msg: str):
    if not cond:
        raise ConfigError(f"{key}: {msg}")


def validate(cfg: RunConfig) -> None:
    try:
        cfg.layout.validate()
    except GeometryError as exc:
        raise ConfigError(str(exc)) from None
    try:
        cfg.env.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    t = cfg.train
    _check(t.algo in ("ppo", "mappo"), "train.algo", f"must be 'ppo' or 'mappo', got {t.algo!r}")
    _check(0 < t.gamma < 1, "train.gamma", f"must lie in (0, 1), got {t.gamma}")
    _check(0 <= t.lam <= 1, "train.lam", f"must lie in [0, 1], got {t.lam}")
    _check(0 < t.clip_eps < 1, "train.clip_eps", f"must lie in (0, 1), got {t.clip_eps}")
    for key in ("total_timesteps", "batch_size", "minibatch_size", "epochs", "workers", "model_horizon"):
        _check(getattr(t, key) > 0, f"train.{key}", f"must be positive, got {getattr(t, key)}")
    _check(t.model_iterations >= 0, "train.model_iterations", "must be non-negative")
    _check(t.batch_size % t.minibatch_size == 0, "train.minibatch_size",
           f"must divide train.batch_size={t.batch_size}")
    _check(t.model_horizon % t.minibatch_size == 0, "train.model_horizon",
           f"must be a multiple of train.minibatch_size={t.minibatch_size}")
    _check(t.lr_start >= 0 and t.lr_end >= 0, "train.lr_start", "learning rates must be non-negative")
    _check(t.lr_end <= t.lr_start, "train.lr_end", "must not exceed train.lr_start")
    _check(len(t.seeds) > 0, "train.seeds", "at least one seed is required")
    _check(len(set(t.seeds)) == len(t.seeds), "train.seeds", "seeds must be distinct")
    _check(t.imagination_restart in ("reset", "real_states"), "train.imagination_restart",
           f"must be 'reset' or 'real_states', got {t.imagination_restart!r}")
    _check(t.entropy_coef >= 0, "train.entropy_coef", "must be non-negative")
    _check(t.max_grad_norm >= 0, "train.max_grad_norm", "must be non-negative (0 disables)")

    n = cfg.net
    _check(n.hidden_layers >= 1, "net.hidden_layers", "must be at least 1")
    _check(n.hidden_units >= 1, "net.hidden_units", "must be at least 1")
    _check(n.sigma_min > 0, "net.sigma_min", "must be positive")
    _check(n.adam_eps > 0, "net.adam_eps", "must be positive")
    _check(0 <= n.adam_beta1 < 1, "net.adam_beta1", "must lie in [0, 1)")
    _check(0 <= n.adam_beta2 < 1, "net.adam_beta2", "must lie in [0, 1)")
    _check(cfg.run.checkpoint_every >= 0, "run.checkpoint_every", "must be non-negative (0 disables)")


def loads(text: str) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return from_mapping(data)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return loads(path.read_text())


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, tuple):
        return "[" + ", ".join(_format(v) for v in value) + "]"
    raise TypeError(value)


def dumps(cfg: RunConfig) -> str:
    lines = []
    for name in SECTIONS:
        section = getattr(cfg, name)
        for f in dataclasses.fields(section):
            lines.append(f"{name}.{f.name} = {_format(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dumps(cfg))
