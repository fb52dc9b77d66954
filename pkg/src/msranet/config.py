"""Run configuration: line-oriented ``key = value`` files with dotted keys.

Precedence is command-line flags, then the config file, then defaults.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthSpec
from .errors import ConfigError, IOFailure
from .model import ModelConfig
from .train import TrainConfig

_NONE = ("none", "null", "")
_TRUE = ("true", "yes", "1", "on")
_FALSE = ("false", "no", "0", "off")


@dataclass
class DataConfig:
    root: str | None = None  # None: generate the synthetic dataset in memory
    folds: int = 5
    plan: str | None = None  # existing fold plan file; None: derive from the seed


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


SECTIONS = ("data", "synth", "model", "train")
_SKIP = {("model", "backbone"), ("train", "seed")}  # not user-settable: structural / tied to the run seed


def _field_types(cls) -> dict[str, typing.Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def known_keys() -> list[str]:
    keys = ["seed", "out"]
    for sec in SECTIONS:
        cls = _field_types(RunConfig)[sec]
        keys += [f"{sec}.{name}" for name in _field_types(cls) if (sec, name) not in _SKIP]
    return keys


def _coerce(key: str, text: str, tp):
    raw = text.strip()
    args = typing.get_args(tp)
    optional = type(None) in args
    if optional:
        if raw.lower() in _NONE:
            return None
        tp = next(a for a in args if a is not type(None))
    try:
        if tp is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {tp.__name__}") from None
    raise ConfigError(f"{key}: unsupported value type {tp}")


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value`` strings; ``#`` starts a comment, later lines win."""
    out: dict[str, str] = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{ln}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{ln}: empty key")
        out[key] = value
    return out


def read_file(path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot read config {path}: {exc}") from exc
    return parse_text(text, str(path))


def apply(cfg: RunConfig, values: dict[str, str]) -> RunConfig:
    """Return a copy of ``cfg`` with the raw string ``values`` applied."""
    top = {"seed": cfg.seed, "out": cfg.out}
    sections = {sec: {} for sec in SECTIONS}
    top_types = _field_types(RunConfig)
    for key, value in values.items():
        if key in top:
            top[key] = _coerce(key, value, top_types[key])
            continue
        sec, _, name = key.partition(".")
        if sec not in sections or not name:
            raise ConfigError(f"unknown config key {key!r}")
        types = _field_types(top_types[sec])
        if name not in types or (sec, name) in _SKIP:
            raise ConfigError(f"unknown config key {key!r}")
        sections[sec][name] = _coerce(key, value, types[name])
    return RunConfig(
        seed=top["seed"],
        out=top["out"],
        **{sec: dataclasses.replace(getattr(cfg, sec), **sections[sec]) for sec in SECTIONS},
    )


def load(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = apply(cfg, read_file(path))
    if overrides:
        cfg = apply(cfg, overrides)
    return cfg


def resolved_train(cfg: RunConfig) -> TrainConfig:
    return dataclasses.replace(cfg.train, seed=cfg.seed)


def validate(cfg: RunConfig) -> None:
    """Check every section, naming the offending key."""
    if cfg.data.folds < 2:
        raise ConfigError(f"data.folds must be at least 2, got {cfg.data.folds}")
    for sec, obj in (("model", cfg.model), ("train", cfg.train)):
        try:
            obj.validate()
        except ConfigError as exc:
            msg = str(exc)
            raise ConfigError(msg if msg.startswith(f"{sec}.") else f"{sec}: {msg}") from None


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump(cfg: RunConfig) -> str:
    """Serialise every settable key, one per line in a fixed order."""
    lines = [f"seed = {cfg.seed}", f"out = {cfg.out}"]
    for key in known_keys()[2:]:
        sec, name = key.split(".", 1)
        lines.append(f"{key} = {_fmt(getattr(getattr(cfg, sec), name))}")
    return "\n".join(lines) + "\n"
