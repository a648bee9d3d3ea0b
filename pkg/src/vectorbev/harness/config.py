"""Flat key=value run configuration.

One namespace covers the model and the run parameters; every key has a
typed default, unknown keys are rejected, and each run writes back the
fully resolved snapshot so results are reproducible from the file alone.
"""
from __future__ import annotations

import dataclasses
from typing import Any

from ..errors import ConfigError
from ..model import ModelConfig

__all__ = [
    "default_config",
    "load_config",
    "apply_overrides",
    "format_config",
    "model_config_of",
]

# run-level keys that live outside ModelConfig
_RUN_DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "scenes": 4,
    "boxes_per_scene": 3,
    "frames": 2,
    "dt": 0.5,
    "steps": 200,
    "lr": 2e-3,
    "lr_schedule": "constant",
    "warmup_steps": 0,
    "weight_decay": 1e-4,
    "clip_norm": 10.0,
    "log_every": 1,
    "checkpoint_every": 100,
    "score_thresh": 0.05,
}

_MODEL_FIELDS = {f.name: f.default for f in dataclasses.fields(ModelConfig)}


def default_config() -> dict[str, Any]:
    cfg = dict(_MODEL_FIELDS)
    cfg.update(_RUN_DEFAULTS)
    return cfg


def _coerce(key: str, raw: str, default: Any) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from e


def _set(cfg: dict[str, Any], key: str, raw: str) -> None:
    if key not in cfg:
        raise ConfigError(f"unknown config key {key!r}")
    cfg[key] = _coerce(key, raw, cfg[key])


def load_config(path: str | None, overrides: list[str] | None = None
                ) -> dict[str, Any]:
    """Defaults, then the config file, then --set overrides."""
    cfg = default_config()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as f:
                lines = f.readlines()
        except OSError as e:
            raise ConfigError(f"cannot read config file {path!r}: {e}") from e
        for lineno, line in enumerate(lines, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {body!r}")
            key, raw = body.split("=", 1)
            _set(cfg, key.strip(), raw)
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg


def apply_overrides(cfg: dict[str, Any], pairs: list[str]) -> None:
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        _set(cfg, key.strip(), raw)


def format_config(cfg: dict[str, Any]) -> str:
    lines = []
    for key in sorted(cfg):
        val = cfg[key]
        if isinstance(val, bool):
            val = "true" if val else "false"
        lines.append(f"{key}={val}")
    return "\n".join(lines) + "\n"


def model_config_of(cfg: dict[str, Any]) -> ModelConfig:
    return ModelConfig(**{k: cfg[k] for k in _MODEL_FIELDS})
