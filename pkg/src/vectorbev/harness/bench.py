"""Encoder scaling benchmarks.

Measures forward wall time (median over repeats after warmup) and peak
transient allocation (tracemalloc) for the vector-query encoder versus a
dense grid of the same nominal resolution. The heavy profile widens the
channel and head counts so array math, not interpreter overhead,
dominates; kernels allocate nothing internally, so tracemalloc sees the
real transient footprint.

Run single-threaded (OMP_NUM_THREADS=1 etc.) for stable slopes.
"""
from __future__ import annotations

import csv
import time
import tracemalloc
from typing import Any

import numpy as np

from ..geometry import make_rig
from ..model import FrameInputs, Model, ModelConfig
from ..numerics import no_grad, tensor, using_precision
from ..numerics.kernels import active_backend, available_backends, set_backend

__all__ = [
    "HEAVY_PROFILE",
    "COMPARE_PROFILE",
    "bench_encoder",
    "vector_config",
    "full_config",
    "run_scaling",
    "compare_modes",
    "compare_backends",
    "fit_slope",
    "write_rows",
]

# Wide channels/heads so per-query linear algebra dominates; one z level
# and small cameras keep the n-independent cost low; large k*delta keeps
# the sparse path's O(n) term well above that constant.
HEAVY_PROFILE: dict[str, Any] = dict(
    C=128, heads=8, points=4, enc_layers=1, dec_layers=1, k=6, delta=4,
    ffn_mult=4, cam_size=16, n_cams=4, z_count=1, temporal_on=False,
)

# Mode comparison at matched nominal resolution uses the default k/delta;
# extra width and sampling points keep per-query arithmetic, not
# interpreter overhead, dominant at the small grid sizes involved.
COMPARE_PROFILE: dict[str, Any] = dict(HEAVY_PROFILE, C=192, points=8,
                                       k=3, delta=2)

_VECTOR_BASE_LR = 8


def vector_config(n: int, profile: dict[str, Any], h_lr: int | None = None
                  ) -> ModelConfig:
    base = h_lr if h_lr is not None else _VECTOR_BASE_LR
    return ModelConfig(h_lr=base, w_lr=base, h_hr=n, w_hr=n, vector_on=True,
                       **profile)


def full_config(n: int, profile: dict[str, Any]) -> ModelConfig:
    return ModelConfig(h_lr=n, w_lr=n, h_hr=n, w_hr=n, vector_on=False,
                       **profile)


def query_count(cfg: ModelConfig) -> int:
    if cfg.vector_on:
        return (cfg.w_hr + cfg.h_hr) * cfg.k * cfg.delta
    return cfg.h_lr * cfg.w_lr


def bench_encoder(cfg: ModelConfig, repeats: int = 5, warmup: int = 2,
                  seed: int = 0) -> tuple[float, int]:
    """(median forward seconds, peak traced bytes) for one encoder config."""
    rng = np.random.default_rng(seed)
    with using_precision("bench"), no_grad():
        model = Model(cfg)
        rig = make_rig(n_cams=cfg.n_cams, fov_deg=cfg.cam_fov_deg,
                       image_w=cfg.cam_size, image_h=cfg.cam_size,
                       cam_height=cfg.cam_height)
        feats = [tensor(rng.standard_normal((cfg.cam_size, cfg.cam_size, cfg.C)))
                 for _ in range(cfg.n_cams)]
        frame = FrameInputs(cam_feats=feats, ego=np.eye(4))
        for _ in range(warmup):
            model.encode_frame(frame, None, rig)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            model.encode_frame(frame, None, rig)
            times.append(time.perf_counter() - t0)
        tracemalloc.start()
        model.encode_frame(frame, None, rig)
        peak = tracemalloc.get_traced_memory()[1]
        tracemalloc.stop()
    return float(np.median(times)), int(peak)


def run_scaling(sizes: list[int], repeats: int = 5,
                profile: dict[str, Any] | None = None,
                modes: tuple[str, ...] = ("vector", "full")
                ) -> list[dict[str, Any]]:
    profile = HEAVY_PROFILE if profile is None else profile
    rows = []
    for mode in modes:
        for n in sizes:
            cfg = vector_config(n, profile) if mode == "vector" \
                else full_config(n, profile)
            try:
                t, peak = bench_encoder(cfg, repeats=repeats)
            except MemoryError:
                t, peak = float("nan"), -1
            rows.append({"n": n, "mode": mode, "queries": query_count(cfg),
                         "time_s": t, "peak_bytes": peak})
    return rows


def write_rows(rows: list[dict[str, Any]], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=["n", "mode", "queries", "time_s",
                                          "peak_bytes"])
        w.writeheader()
        w.writerows(rows)


def fit_slope(ns: list[float], ys: list[float]) -> float:
    """Least-squares slope of log(y) against log(n), ignoring bad rows."""
    pts = [(n, y) for n, y in zip(ns, ys) if np.isfinite(y) and y > 0]
    if len(pts) < 2:
        return float("nan")
    lx = np.log([p[0] for p in pts])
    ly = np.log([p[1] for p in pts])
    return float(np.polyfit(lx, ly, 1)[0])


def slopes_of(rows: list[dict[str, Any]], mode: str) -> dict[str, float]:
    sel = [r for r in rows if r["mode"] == mode]
    ns = [r["n"] for r in sel]
    return {
        "time": fit_slope(ns, [r["time_s"] for r in sel]),
        "queries": fit_slope(ns, [float(r["queries"]) for r in sel]),
    }


def compare_backends(n: int = 64, repeats: int = 5,
                     profile: dict[str, Any] | None = None
                     ) -> dict[str, float]:
    """Median encoder forward time under each registered kernel backend.

    The same model and inputs run once per backend; the active backend is
    restored afterwards.
    """
    profile = HEAVY_PROFILE if profile is None else profile
    initial = active_backend()
    out: dict[str, float] = {}
    try:
        for name in available_backends():
            set_backend(name)
            t, _ = bench_encoder(vector_config(n, profile), repeats=repeats)
            out[f"time_{name}_s"] = t
    finally:
        set_backend(initial)
    return out


def compare_modes(n: int = 45, lr_vector: int = 20, repeats: int = 5,
                  profile: dict[str, Any] | None = None) -> dict[str, float]:
    """Vector mode (coarse LR grid + length-n vectors) vs a dense n*n grid."""
    profile = COMPARE_PROFILE if profile is None else profile
    t_vec, p_vec = bench_encoder(vector_config(n, profile, h_lr=lr_vector),
                                 repeats=repeats)
    t_full, p_full = bench_encoder(full_config(n, profile), repeats=repeats)
    return {
        "time_vector_s": t_vec, "time_full_s": t_full,
        "peak_vector_bytes": float(p_vec), "peak_full_bytes": float(p_full),
        "time_reduction": 1.0 - t_vec / t_full,
        "peak_reduction": 1.0 - p_vec / p_full,
    }
