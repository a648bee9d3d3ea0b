"""Global precision mode.

Two modes exist:

* ``test``  -- float64, finite-value guards active. Every correctness and
  gradient suite runs here.
* ``bench`` -- float32, guards off so timing loops measure arithmetic,
  not validation.
"""
from __future__ import annotations

import contextlib

import numpy as np

from ..errors import ConfigError

_MODES = {"test": np.float64, "bench": np.float32}

_mode = "test"


def set_precision(mode: str) -> None:
    global _mode
    if mode not in _MODES:
        raise ConfigError(f"unknown precision mode {mode!r}; expected one of {sorted(_MODES)}")
    _mode = mode


def get_precision() -> str:
    return _mode


def active_dtype() -> np.dtype:
    return np.dtype(_MODES[_mode])


def finite_checks_enabled() -> bool:
    return _mode == "test"


@contextlib.contextmanager
def using_precision(mode: str):
    prev = _mode
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(prev)
