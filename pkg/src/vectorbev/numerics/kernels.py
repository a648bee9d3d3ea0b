"""Hot sampling kernels: bilinear gather/scatter and fused deformable sampling.

Two interchangeable backends implement the same arithmetic:

* ``numba``  -- @njit scalar loops (default when numba imports).
* ``numpy``  -- vectorized fallback, selected with ``VECTORBEV_BACKEND=numpy``.

Kernels never allocate; callers pass preallocated outputs so transient
allocation stays visible to the harness memory instrumentation.

Coordinate convention (shared with the tensor-level ops): cell ``(row i,
col j)`` has its center at ``(x=j+0.5, y=i+0.5)``; the valid coordinate
domain is ``[0, W] x [0, H]`` and anything outside clamps to the border.
"""
from __future__ import annotations

import os

import numpy as np

from ..errors import ConfigError

__all__ = [
    "active_backend",
    "set_backend",
    "bilinear_gather",
    "bilinear_scatter_grid",
    "bilinear_coord_grad",
    "deform_sample",
    "deform_sample_bwd",
]


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------

def _corners(xy, H, W):
    """Shared index/weight computation for the vectorized path."""
    u = np.clip(xy[:, 0] - 0.5, -1.0, float(W))
    v = np.clip(xy[:, 1] - 0.5, -1.0, float(H))
    x0 = np.floor(u)
    y0 = np.floor(v)
    tx = u - x0
    ty = v - y0
    x0c = np.clip(x0, 0, W - 1).astype(np.intp)
    x1c = np.clip(x0 + 1, 0, W - 1).astype(np.intp)
    y0c = np.clip(y0, 0, H - 1).astype(np.intp)
    y1c = np.clip(y0 + 1, 0, H - 1).astype(np.intp)
    return x0c, x1c, y0c, y1c, tx, ty


def _np_bilinear_gather(grid, xy, out):
    H, W, _ = grid.shape
    x0, x1, y0, y1, tx, ty = _corners(xy, H, W)
    tx = tx[:, None]
    ty = ty[:, None]
    top = grid[y0, x0] * (1 - tx) + grid[y0, x1] * tx
    bot = grid[y1, x0] * (1 - tx) + grid[y1, x1] * tx
    np.multiply(top, 1 - ty, out=out)
    out += bot * ty


def _np_bilinear_scatter_grid(gout, xy, ggrid):
    H, W, _ = ggrid.shape
    x0, x1, y0, y1, tx, ty = _corners(xy, H, W)
    tx = tx[:, None]
    ty = ty[:, None]
    np.add.at(ggrid, (y0, x0), gout * (1 - tx) * (1 - ty))
    np.add.at(ggrid, (y0, x1), gout * tx * (1 - ty))
    np.add.at(ggrid, (y1, x0), gout * (1 - tx) * ty)
    np.add.at(ggrid, (y1, x1), gout * tx * ty)


def _np_bilinear_coord_grad(grid, xy, gout, gxy):
    H, W, _ = grid.shape
    x0, x1, y0, y1, tx, ty = _corners(xy, H, W)
    xin = (xy[:, 0] - 0.5 > -1.0) & (xy[:, 0] - 0.5 < float(W))
    yin = (xy[:, 1] - 0.5 > -1.0) & (xy[:, 1] - 0.5 < float(H))
    dx = (grid[y0, x1] - grid[y0, x0]) * (1 - ty)[:, None] + (grid[y1, x1] - grid[y1, x0]) * ty[:, None]
    dy = (grid[y1, x0] - grid[y0, x0]) * (1 - tx)[:, None] + (grid[y1, x1] - grid[y0, x1]) * tx[:, None]
    gxy[:, 0] = np.sum(gout * dx, axis=1) * xin
    gxy[:, 1] = np.sum(gout * dy, axis=1) * yin


def _np_deform_sample(value, xy, w, out):
    N, heads, points, _ = xy.shape
    C = value.shape[2]
    d = C // heads
    out[:] = 0
    samp = np.empty((N, C), dtype=value.dtype)
    for h in range(heads):
        lo = h * d
        for p in range(points):
            _np_bilinear_gather(value, xy[:, h, p, :], samp)
            out[:, lo:lo + d] += samp[:, lo:lo + d] * w[:, h, p][:, None]


def _np_deform_sample_bwd(value, xy, w, gout, gvalue, gxy, gw):
    N, heads, points, _ = xy.shape
    H, W, C = value.shape
    d = C // heads
    samp = np.empty((N, C), dtype=value.dtype)
    gslice = np.zeros((N, C), dtype=value.dtype)
    gxy_hp = np.empty((N, 2), dtype=value.dtype)
    for h in range(heads):
        lo = h * d
        for p in range(points):
            coords = xy[:, h, p, :]
            _np_bilinear_gather(value, coords, samp)
            gw[:, h, p] = np.sum(gout[:, lo:lo + d] * samp[:, lo:lo + d], axis=1)
            gslice[:, lo:lo + d] = gout[:, lo:lo + d] * w[:, h, p][:, None]
            _np_bilinear_scatter_grid(gslice, coords, gvalue)
            _np_bilinear_coord_grad(value, coords, gslice, gxy_hp)
            gxy[:, h, p, :] = gxy_hp
            gslice[:, lo:lo + d] = 0


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

try:  # pragma: no cover - exercised through the dispatcher
    from numba import njit

    @njit(cache=True)
    def _nb_corners(x, y, H, W):
        u = x - 0.5
        v = y - 0.5
        if u < -1.0:
            u = -1.0
        elif u > W:
            u = float(W)
        if v < -1.0:
            v = -1.0
        elif v > H:
            v = float(H)
        x0 = int(np.floor(u))
        y0 = int(np.floor(v))
        tx = u - x0
        ty = v - y0
        x0c = min(max(x0, 0), W - 1)
        x1c = min(max(x0 + 1, 0), W - 1)
        y0c = min(max(y0, 0), H - 1)
        y1c = min(max(y0 + 1, 0), H - 1)
        return x0c, x1c, y0c, y1c, tx, ty

    @njit(cache=True)
    def _nb_bilinear_gather(grid, xy, out):
        H, W, C = grid.shape
        for i in range(xy.shape[0]):
            x0, x1, y0, y1, tx, ty = _nb_corners(xy[i, 0], xy[i, 1], H, W)
            for c in range(C):
                top = grid[y0, x0, c] * (1 - tx) + grid[y0, x1, c] * tx
                bot = grid[y1, x0, c] * (1 - tx) + grid[y1, x1, c] * tx
                out[i, c] = top * (1 - ty) + bot * ty

    @njit(cache=True)
    def _nb_bilinear_scatter_grid(gout, xy, ggrid):
        H, W, C = ggrid.shape
        for i in range(xy.shape[0]):
            x0, x1, y0, y1, tx, ty = _nb_corners(xy[i, 0], xy[i, 1], H, W)
            for c in range(C):
                g = gout[i, c]
                ggrid[y0, x0, c] += g * (1 - tx) * (1 - ty)
                ggrid[y0, x1, c] += g * tx * (1 - ty)
                ggrid[y1, x0, c] += g * (1 - tx) * ty
                ggrid[y1, x1, c] += g * tx * ty

    @njit(cache=True)
    def _nb_bilinear_coord_grad(grid, xy, gout, gxy):
        H, W, C = grid.shape
        for i in range(xy.shape[0]):
            x0, x1, y0, y1, tx, ty = _nb_corners(xy[i, 0], xy[i, 1], H, W)
            xin = 1.0 if (-1.0 < xy[i, 0] - 0.5 < float(W)) else 0.0
            yin = 1.0 if (-1.0 < xy[i, 1] - 0.5 < float(H)) else 0.0
            gx = 0.0
            gy = 0.0
            for c in range(C):
                g = gout[i, c]
                gx += g * ((grid[y0, x1, c] - grid[y0, x0, c]) * (1 - ty)
                           + (grid[y1, x1, c] - grid[y1, x0, c]) * ty)
                gy += g * ((grid[y1, x0, c] - grid[y0, x0, c]) * (1 - tx)
                           + (grid[y1, x1, c] - grid[y0, x1, c]) * tx)
            gxy[i, 0] = gx * xin
            gxy[i, 1] = gy * yin

    @njit(cache=True)
    def _nb_deform_sample(value, xy, w, out):
        H, W, C = value.shape
        N, heads, points, _ = xy.shape
        d = C // heads
        for i in range(N):
            for c in range(C):
                out[i, c] = 0.0
            for h in range(heads):
                lo = h * d
                for p in range(points):
                    x0, x1, y0, y1, tx, ty = _nb_corners(xy[i, h, p, 0], xy[i, h, p, 1], H, W)
                    wh = w[i, h, p]
                    for c in range(lo, lo + d):
                        top = value[y0, x0, c] * (1 - tx) + value[y0, x1, c] * tx
                        bot = value[y1, x0, c] * (1 - tx) + value[y1, x1, c] * tx
                        out[i, c] += wh * (top * (1 - ty) + bot * ty)

    @njit(cache=True)
    def _nb_deform_sample_bwd(value, xy, w, gout, gvalue, gxy, gw):
        H, W, C = value.shape
        N, heads, points, _ = xy.shape
        d = C // heads
        for i in range(N):
            for h in range(heads):
                lo = h * d
                for p in range(points):
                    px = xy[i, h, p, 0]
                    py = xy[i, h, p, 1]
                    x0, x1, y0, y1, tx, ty = _nb_corners(px, py, H, W)
                    xin = 1.0 if (-1.0 < px - 0.5 < float(W)) else 0.0
                    yin = 1.0 if (-1.0 < py - 0.5 < float(H)) else 0.0
                    wh = w[i, h, p]
                    acc_w = 0.0
                    gx = 0.0
                    gy = 0.0
                    for c in range(lo, lo + d):
                        g = gout[i, c]
                        top = value[y0, x0, c] * (1 - tx) + value[y0, x1, c] * tx
                        bot = value[y1, x0, c] * (1 - tx) + value[y1, x1, c] * tx
                        acc_w += g * (top * (1 - ty) + bot * ty)
                        gw_c = g * wh
                        gvalue[y0, x0, c] += gw_c * (1 - tx) * (1 - ty)
                        gvalue[y0, x1, c] += gw_c * tx * (1 - ty)
                        gvalue[y1, x0, c] += gw_c * (1 - tx) * ty
                        gvalue[y1, x1, c] += gw_c * tx * ty
                        gx += gw_c * ((value[y0, x1, c] - value[y0, x0, c]) * (1 - ty)
                                      + (value[y1, x1, c] - value[y1, x0, c]) * ty)
                        gy += gw_c * ((value[y1, x0, c] - value[y0, x0, c]) * (1 - tx)
                                      + (value[y1, x1, c] - value[y0, x1, c]) * tx)
                    gw[i, h, p] = acc_w
                    gxy[i, h, p, 0] = gx * xin
                    gxy[i, h, p, 1] = gy * yin

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False


_IMPLS = {
    "numpy": (
        _np_bilinear_gather,
        _np_bilinear_scatter_grid,
        _np_bilinear_coord_grad,
        _np_deform_sample,
        _np_deform_sample_bwd,
    ),
}
if _HAVE_NUMBA:
    _IMPLS["numba"] = (
        _nb_bilinear_gather,
        _nb_bilinear_scatter_grid,
        _nb_bilinear_coord_grad,
        _nb_deform_sample,
        _nb_deform_sample_bwd,
    )

_backend = os.environ.get("VECTORBEV_BACKEND", "numba" if _HAVE_NUMBA else "numpy")
if _backend not in _IMPLS:
    raise ImportError(
        f"VECTORBEV_BACKEND={_backend!r} is not available; choices: {sorted(_IMPLS)}"
    )


def available_backends() -> list:
    return sorted(_IMPLS)


def set_backend(name: str) -> None:
    """Rebind the kernel dispatch. Used by tests and the backend benchmark."""
    global _backend
    if name not in _IMPLS:
        raise ConfigError(f"unknown backend {name!r}; choices: {sorted(_IMPLS)}")
    _backend = name


def active_backend() -> str:
    return _backend


def bilinear_gather(grid, xy, out):
    _IMPLS[_backend][0](grid, xy, out)


def bilinear_scatter_grid(gout, xy, ggrid):
    _IMPLS[_backend][1](gout, xy, ggrid)


def bilinear_coord_grad(grid, xy, gout, gxy):
    _IMPLS[_backend][2](grid, xy, gout, gxy)


def deform_sample(value, xy, w, out):
    _IMPLS[_backend][3](value, xy, w, out)


def deform_sample_bwd(value, xy, w, gout, gvalue, gxy, gw):
    _IMPLS[_backend][4](value, xy, w, gout, gvalue, gxy, gw)
