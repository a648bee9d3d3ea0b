"""Central-difference gradient verification."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

__all__ = ["GradReport", "check_gradients"]


@dataclass
class GradReport:
    max_rel_err: float
    worst_param: str
    per_param: dict[str, float] = field(default_factory=dict)

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


def check_gradients(
    f: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]] | dict[str, Tensor],
    eps: float = 1e-5,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradReport:
    """Compare backward() gradients of the scalar ``f()`` against central
    differences over every listed parameter.

    ``sample`` limits the number of perturbed elements per parameter
    (seeded through ``rng``); None checks all of them. Relative error is
    ``|a - n| / max(1, |a|, |n|)`` and the report keeps the per-parameter
    maximum.
    """
    if isinstance(params, dict):
        params = list(params.items())
    for _, p in params:
        p.zero_grad()
    loss = f()
    loss.backward()
    # keyed by position: the same name may appear twice (e.g. two norms)
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
             for _, p in params]

    per_param: dict[str, float] = {}
    worst = ("", 0.0)
    for (name, p), grad in zip(params, grads):
        flat = p.data.reshape(-1)
        n_el = flat.size
        if sample is not None and sample < n_el:
            if rng is None:
                rng = np.random.default_rng(0)
            picks = rng.choice(n_el, size=sample, replace=False)
        else:
            picks = np.arange(n_el)
        analytic = grad.reshape(-1)
        err = 0.0
        for j in picks:
            orig = flat[j]
            with no_grad():
                flat[j] = orig + eps
                hi = f().item()
                flat[j] = orig - eps
                lo = f().item()
            flat[j] = orig
            err = max(err, _rel_err(float(analytic[j]), (hi - lo) / (2 * eps)))
        per_param[name] = max(err, per_param.get(name, 0.0))
        if err >= worst[1]:
            worst = (name, err)
    return GradReport(max_rel_err=worst[1], worst_param=worst[0], per_param=per_param)
