"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    resolution: int = 64
    batch_size: int = 32
    max_epochs: int = 150
    patience: int = 10
    learning_rate: float = 0.001
    dropout_rate: float = 0.5
    l2_rate: float = 0.0
    lambda_cycle: float = 10.0
    lambda_identity: float = 5.0
    data_root: str = "data"
    out_dir: str = "out"

    def __post_init__(self):
        for name in ("resolution", "batch_size", "max_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.patience < 1:
            raise ConfigError("patience must be positive")
        for name in ("learning_rate", "dropout_rate", "l2_rate", "lambda_cycle", "lambda_identity"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if min(self.l2_rate, self.lambda_cycle, self.lambda_identity) < 0:
            raise ConfigError("l2_rate, lambda_cycle and lambda_identity must be non-negative")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.resolution, self.resolution, 3)

    def updated(self, values: Mapping[str, Any]) -> RunConfig:
        return replace(self, **coerce(values))

    def dump(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    def write(self, directory: Path, name: str = "run.cfg") -> Path:
        path = Path(directory) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dump())
        return path


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(values: Mapping[str, Any]) -> dict[str, Any]:
    out = {}
    for key, raw in values.items():
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        kind = _TYPES[key]
        try:
            if kind == "int":
                out[key] = int(str(raw).split("x")[0]) if key == "resolution" else int(raw)
            elif kind == "float":
                out[key] = float(raw)
            else:
                out[key] = str(raw)
        except ValueError:
            raise ConfigError(f"bad value {raw!r} for {key}") from None
    return out


def parse(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def load(path: Path | None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Defaults, then the file (if any), then explicit overrides."""
    values: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        values.update(parse(path.read_text(), str(path)))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig().updated(values)
