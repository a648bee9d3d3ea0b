"""Define-by-run reverse-mode autodiff over numpy arrays.

A ``Tensor`` wraps an ndarray plus an optional gradient and a backward
closure recorded at construction time. ``backward()`` on a scalar walks
the recorded graph in reverse topological order. Ops validate output
finiteness while the global precision mode is ``test``; the ``bench``
mode skips the checks so timing reflects the arithmetic alone.

Differentiable sampling (``bilinear_sample``, ``deform_sample``) defers
to the kernel backends in :mod:`vectorbev.numerics.kernels`.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, NumericsError, ShapeError
from . import kernels
from .precision import active_dtype, finite_checks_enabled

__all__ = [
    "Tensor",
    "tensor",
    "param",
    "no_grad",
    "grad_enabled",
    "concat",
    "matmul",
    "gather_rows",
    "scatter_rows_add",
    "slice_axis",
    "pad2d",
    "softmax",
    "layer_norm",
    "bilinear_sample",
    "deform_sample",
    "log_sigmoid",
    "softplus",
]

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _guard(name: str, arr: np.ndarray) -> None:
    if finite_checks_enabled() and not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values produced by {name}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _op(name: str, data: np.ndarray, parents: Sequence["Tensor"],
            backward: Callable[[np.ndarray], None]) -> "Tensor":
        _guard(name, data)
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- conveniences --------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        a, b = self, _as_tensor(other)

        def bwd(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.data.shape))
        return Tensor._op("add", a.data + b.data, (a, b), bwd)

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self, _as_tensor(other)

        def bwd(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g, b.data.shape))
        return Tensor._op("sub", a.data - b.data, (a, b), bwd)

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        a, b = self, _as_tensor(other)

        def bwd(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.data.shape))
        return Tensor._op("mul", a.data * b.data, (a, b), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, _as_tensor(other)

        def bwd(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
        return Tensor._op("div", a.data / b.data, (a, b), bwd)

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __neg__(self):
        a = self

        def bwd(g):
            a._accum(-g)
        return Tensor._op("neg", -a.data, (a,), bwd)

    def __pow__(self, p: float):
        a = self
        out = a.data ** p

        def bwd(g):
            a._accum(g * p * a.data ** (p - 1))
        return Tensor._op("pow", out, (a,), bwd)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            if axis is None:
                a._accum(np.broadcast_to(g, a.data.shape).copy())
            else:
                gk = g if keepdims else np.expand_dims(g, axis)
                a._accum(np.broadcast_to(gk, a.data.shape).copy())
        return Tensor._op("sum", out, (a,), bwd)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else (
            np.prod([self.data.shape[i] for i in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- shape ---------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        try:
            out = a.data.reshape(shape)
        except ValueError as e:
            raise ShapeError(f"cannot reshape {a.data.shape} into {shape}") from e

        def bwd(g):
            a._accum(g.reshape(a.data.shape))
        return Tensor._op("reshape", out, (a,), bwd)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        a = self
        inv = tuple(np.argsort(axes))

        def bwd(g):
            a._accum(g.transpose(inv))
        return Tensor._op("transpose", a.data.transpose(axes), (a,), bwd)

    @property
    def T(self):
        return self.transpose()

    # -- elementwise ---------------------------------------------------------

    def relu(self):
        a = self
        mask = a.data > 0

        def bwd(g):
            a._accum(g * mask)
        return Tensor._op("relu", a.data * mask, (a,), bwd)

    def tanh(self):
        a = self
        out = np.tanh(a.data)

        def bwd(g):
            a._accum(g * (1 - out * out))
        return Tensor._op("tanh", out, (a,), bwd)

    def sigmoid(self):
        a = self
        out = _sigmoid(a.data)

        def bwd(g):
            a._accum(g * out * (1 - out))
        return Tensor._op("sigmoid", out, (a,), bwd)

    def exp(self):
        a = self
        out = np.exp(a.data)

        def bwd(g):
            a._accum(g * out)
        return Tensor._op("exp", out, (a,), bwd)

    def log(self):
        a = self

        def bwd(g):
            a._accum(g / a.data)
        return Tensor._op("log", np.log(a.data), (a,), bwd)

    def sqrt(self):
        a = self
        out = np.sqrt(a.data)

        def bwd(g):
            a._accum(g * 0.5 / out)
        return Tensor._op("sqrt", out, (a,), bwd)

    def abs(self):
        a = self
        sign = np.sign(a.data)

        def bwd(g):
            a._accum(g * sign)
        return Tensor._op("abs", np.abs(a.data), (a,), bwd)

    def clamp(self, lo: float | None = None, hi: float | None = None):
        a = self
        out = np.clip(a.data, lo, hi)
        mask = np.ones_like(a.data)
        if lo is not None:
            mask = mask * (a.data >= lo)
        if hi is not None:
            mask = mask * (a.data <= hi)

        def bwd(g):
            a._accum(g * mask)
        return Tensor._op("clamp", out, (a,), bwd)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=active_dtype()))


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Leaf tensor in the active precision."""
    return Tensor(np.asarray(data, dtype=active_dtype()), requires_grad=requires_grad)


def param(data) -> Tensor:
    """Trainable leaf tensor in the active precision."""
    return tensor(data, requires_grad=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# free functions
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim not in (2, 3) or b.data.ndim != a.data.ndim:
        raise ShapeError(
            f"matmul expects matching 2-D or 3-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    if a.data.ndim == 3 and a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"matmul batch dims differ: {a.data.shape} @ {b.data.shape}")

    def bwd(g):
        if a.requires_grad:
            a._accum(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accum(np.swapaxes(a.data, -1, -2) @ g)
    return Tensor._op("matmul", a.data @ b.data, (a, b), bwd)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, s, e in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(s, e)
                p._accum(g[tuple(idx)])
    return Tensor._op("concat", np.concatenate([p.data for p in parts], axis=axis),
                      parts, bwd)


def slice_axis(t: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * t.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bwd(g):
        gt = np.zeros_like(t.data)
        gt[idx] = g
        t._accum(gt)
    return Tensor._op("slice", t.data[idx].copy(), (t,), bwd)


def gather_rows(t: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds."""
    if t.data.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-D tensor, got {t.data.shape}")
    idx = np.asarray(idx)

    def bwd(g):
        gt = np.zeros_like(t.data)
        np.add.at(gt, idx, g)
        t._accum(gt)
    return Tensor._op("gather_rows", t.data[idx], (t,), bwd)


def scatter_rows_add(base: Tensor, idx: np.ndarray, rows: Tensor) -> Tensor:
    """out = base with rows[i] added at row idx[i]; duplicates accumulate."""
    if base.data.ndim != 2 or rows.data.ndim != 2:
        raise ShapeError("scatter_rows_add expects 2-D tensors")
    idx = np.asarray(idx)
    out = base.data.copy()
    np.add.at(out, idx, rows.data)

    def bwd(g):
        if base.requires_grad:
            base._accum(g)
        if rows.requires_grad:
            rows._accum(g[idx])
    return Tensor._op("scatter_rows_add", out, (base, rows), bwd)


def pad2d(t: Tensor, pad: int) -> Tensor:
    """Zero-pad the leading two axes of an [H, W, C] tensor."""
    if t.data.ndim != 3:
        raise ShapeError(f"pad2d expects [H, W, C], got {t.data.shape}")
    out = np.pad(t.data, ((pad, pad), (pad, pad), (0, 0)))

    def bwd(g):
        t._accum(g[pad:-pad, pad:-pad, :] if pad else g)
    return Tensor._op("pad2d", out, (t,), bwd)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    x = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        t._accum(s * (g - (g * s).sum(axis=axis, keepdims=True)))
    return Tensor._op("softmax", s, (t,), bwd)


def softplus(t: Tensor) -> Tensor:
    a = t
    out = np.logaddexp(0.0, a.data)

    def bwd(g):
        a._accum(g * _sigmoid(a.data))
    return Tensor._op("softplus", out, (a,), bwd)


def log_sigmoid(t: Tensor) -> Tensor:
    """log(sigmoid(x)) computed stably as -softplus(-x)."""
    return -softplus(-t)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; composed from primitive ops."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = (var + eps) ** -0.5
    return centered * inv * gamma + beta


def bilinear_sample(grid: Tensor, xy: Tensor) -> Tensor:
    """Sample [H, W, C] at continuous [N, 2] coords; differentiable in both."""
    if grid.data.ndim != 3 or xy.data.ndim != 2 or xy.data.shape[1] != 2:
        raise ShapeError(
            f"bilinear_sample expects [H,W,C] and [N,2], got {grid.data.shape}, {xy.data.shape}")
    H, W, C = grid.data.shape
    out = np.empty((xy.data.shape[0], C), dtype=grid.data.dtype)
    kernels.bilinear_gather(grid.data, xy.data, out)

    def bwd(g):
        g = np.ascontiguousarray(g)
        if grid.requires_grad:
            ggrid = np.zeros_like(grid.data)
            kernels.bilinear_scatter_grid(g, xy.data, ggrid)
            grid._accum(ggrid)
        if xy.requires_grad:
            gxy = np.empty_like(xy.data)
            kernels.bilinear_coord_grad(grid.data, xy.data, g, gxy)
            xy._accum(gxy)
    return Tensor._op("bilinear_sample", out, (grid, xy), bwd)


def deform_sample(value: Tensor, xy: Tensor, w: Tensor) -> Tensor:
    """Fused multi-head weighted sampling.

    value: [H, W, C]; xy: [N, heads, points, 2]; w: [N, heads, points].
    Head h reads channel block [h*C/heads, (h+1)*C/heads). Returns [N, C].
    """
    if value.data.ndim != 3 or xy.data.ndim != 4 or w.data.ndim != 3:
        raise ShapeError("deform_sample expects [H,W,C], [N,h,p,2], [N,h,p]")
    N, heads, points, _ = xy.data.shape
    H, W, C = value.data.shape
    if C % heads != 0:
        raise ShapeError(f"channels {C} not divisible by heads {heads}")
    if w.data.shape != (N, heads, points):
        raise ShapeError(f"weight shape {w.data.shape} != {(N, heads, points)}")
    out = np.empty((N, C), dtype=value.data.dtype)
    kernels.deform_sample(value.data, xy.data, w.data, out)

    def bwd(g):
        g = np.ascontiguousarray(g)
        gvalue = np.zeros_like(value.data)
        gxy = np.empty_like(xy.data)
        gw = np.empty_like(w.data)
        kernels.deform_sample_bwd(value.data, xy.data, w.data, g, gvalue, gxy, gw)
        if value.requires_grad:
            value._accum(gvalue)
        if xy.requires_grad:
            xy._accum(gxy)
        if w.requires_grad:
            w._accum(gw)
    return Tensor._op("deform_sample", out, (value, xy, w), bwd)
