"""Flat ``key=value`` run configuration with typed defaults."""

from __future__ import annotations

from dataclasses import fields
from importlib import resources
from pathlib import Path

from .data import SyntheticSpec
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _defaults() -> dict:
    d = {f.name: f.default for f in fields(TrainConfig)}
    d.update({
        "data": "",
        "labels": "",
        "checkpoint": "",
        "min_user_len": 3,
        "cutoffs": "10,50",
        "mode": "",      # evaluation/retrieval aggregation; empty = aggregation_mode
    })
    synth = {f.name: f.default for f in fields(SyntheticSpec) if f.name != "seed"}
    d.update(synth)
    return d


DEFAULTS = _defaults()
PRESETS = ("movielens", "amazon", "taobao", "ularge", "synthetic")


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_lines(lines, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def read_config(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_lines(path.read_text(encoding="utf-8").splitlines(), str(path))


def read_preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("sinerec").joinpath("presets", f"{name}.cfg").read_text(encoding="utf-8")
    return parse_lines(text.splitlines(), f"preset:{name}")


def resolve(*layers: dict) -> dict:
    cfg = dict(DEFAULTS)
    for layer in layers:
        cfg.update(layer)
    return cfg


def dump(cfg: dict) -> str:
    """Fully resolved config in a stable key order."""
    lines = ["# resolved configuration"]
    for key in DEFAULTS:
        value = cfg[key]
        if isinstance(value, bool):
            value = int(value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(**{f.name: cfg[f.name] for f in fields(TrainConfig)})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def synthetic_spec(cfg: dict) -> SyntheticSpec:
    return SyntheticSpec(**{f.name: cfg[f.name] for f in fields(SyntheticSpec) if f.name != "seed"},
                         seed=cfg["seed"])


def cutoffs(cfg: dict) -> list[int]:
    try:
        values = sorted(int(c) for c in str(cfg["cutoffs"]).split(",") if c.strip())
    except ValueError:
        raise ConfigError(f"cutoffs: cannot parse {cfg['cutoffs']!r}") from None
    if not values or values[0] < 1:
        raise ConfigError("cutoffs must be positive integers")
    return values
