"""Factorized vector representation of high-resolution BEV features.

A dense h_hr x w_hr x C grid never exists. Two 1-D trainable tensors (vx
over the width axis, vy over the height axis) plus matching positional
embeddings stand in for it; features at continuous HR coordinates are
composed by sampling each vector at one coordinate component and
combining elementwise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .numerics import Tensor, bilinear_sample, concat, slice_axis, tensor

__all__ = [
    "VectorQueryPair",
    "SparseHrSet",
    "init_vector_queries",
    "sample_vector",
    "compose_sparse_hr",
    "sample_pe",
]

AXIS_X = 0  # entry owned by a vx cell (selected along its column)
AXIS_Y = 1  # entry owned by a vy cell


@dataclass
class VectorQueryPair:
    vx: Tensor   # [w_hr, C]
    vy: Tensor   # [h_hr, C]
    pex: Tensor  # [w_hr, C]
    pey: Tensor  # [h_hr, C]
    combine: str = "add"

    def __post_init__(self):
        if self.combine not in ("add", "multiply"):
            raise ContractError(f"combine must be add or multiply, got {self.combine!r}")
        if self.vx.shape != self.pex.shape or self.vy.shape != self.pey.shape:
            raise ShapeError("queries and positional embeddings must match in shape")
        if self.vx.shape[1] != self.vy.shape[1]:
            raise ShapeError("vx and vy must share the channel dimension")

    @property
    def w_hr(self) -> int:
        return self.vx.shape[0]

    @property
    def h_hr(self) -> int:
        return self.vy.shape[0]

    @property
    def channels(self) -> int:
        return self.vx.shape[1]


@dataclass
class SparseHrSet:
    """Sparse HR BEV entries: coordinates, features, and owning vector cell.

    Entries owned by vx cells come first (owner_axis == AXIS_X), then vy
    entries; the gathering stage relies on that ordering. ``coords`` is the
    detached value; ``coords_t`` carries the in-graph coordinates when
    gradients must reach learned offsets through later sampling.
    """
    coords: np.ndarray      # [N, 2] HR cell units, detached
    feats: Tensor           # [N, C]
    owner_axis: np.ndarray  # [N] in {AXIS_X, AXIS_Y}
    owner_index: np.ndarray  # [N] owning cell along its axis
    coords_t: Tensor | None = None

    def __post_init__(self):
        n = self.coords.shape[0]
        if self.feats.shape[0] != n or self.owner_axis.shape[0] != n \
                or self.owner_index.shape[0] != n:
            raise ShapeError("sparse set fields disagree on entry count")

    @property
    def n_x(self) -> int:
        return int(np.sum(self.owner_axis == AXIS_X))

    def replace_feats(self, feats: Tensor) -> "SparseHrSet":
        return SparseHrSet(self.coords, feats, self.owner_axis, self.owner_index,
                           self.coords_t)

    def coords_tensor(self) -> Tensor:
        """In-graph coordinates, falling back to a constant of the values."""
        if self.coords_t is not None:
            return self.coords_t
        return tensor(self.coords)

    def group_sizes(self, w_hr: int, h_hr: int) -> np.ndarray:
        """Entries per vector cell, vx cells first. Uniform when valid."""
        flat = np.where(self.owner_axis == AXIS_X, self.owner_index,
                        w_hr + self.owner_index)
        return np.bincount(flat, minlength=w_hr + h_hr)


def init_vector_queries(w_hr: int, h_hr: int, C: int, seed: int,
                        combine: str = "add") -> VectorQueryPair:
    """Seeded zero-mean normal init, std 0.02, for queries and embeddings."""
    if min(w_hr, h_hr, C) < 1:
        raise ContractError("vector extents and channels must be positive")
    rng = np.random.default_rng(seed)
    mk = lambda n: tensor(rng.normal(0.0, 0.02, size=(n, C)), requires_grad=True)
    return VectorQueryPair(vx=mk(w_hr), vy=mk(h_hr), pex=mk(w_hr), pey=mk(h_hr),
                           combine=combine)


def _with_center_row(x, n: int, dtype) -> Tensor:
    """Pair 1-D x coordinates with the fixed y=0.5 center of an H=1 grid."""
    half = np.full((n, 1), 0.5, dtype=dtype)
    if isinstance(x, Tensor):
        return concat([x.reshape(n, 1), Tensor(half)], axis=1)
    xy = np.concatenate([np.asarray(x, dtype=dtype).reshape(n, 1), half], axis=1)
    return Tensor(xy)


def sample_vector(vec: Tensor, x) -> Tensor:
    """Sample a [L, C] vector at continuous 1-D coordinates.

    Reuses the 2-D kernel over an H=1 grid; the single row is the cell
    center at y=0.5, so the result is pure 1-D interpolation on x. When
    ``x`` is a Tensor the sample is differentiable in it.
    """
    n = x.shape[0]
    grid = vec.reshape(1, vec.shape[0], vec.shape[1])
    return bilinear_sample(grid, _with_center_row(x, n, vec.data.dtype))


def compose_sparse_hr(vq: VectorQueryPair, coords,
                      owner_axis: np.ndarray | None = None,
                      owner_index: np.ndarray | None = None) -> SparseHrSet:
    """Build sparse HR features at the given coordinates.

    feats[n] = combine(vx sampled at coords[n].x, vy sampled at coords[n].y),
    with combine elementwise add (default) or multiply. ``coords`` may be a
    Tensor to keep learned offsets in the gradient path.
    """
    coords_t = coords if isinstance(coords, Tensor) else None
    coords_np = np.asarray(coords.data if coords_t is not None else coords,
                           dtype=np.float64).reshape(-1, 2)
    n = coords_np.shape[0]
    if owner_axis is None:
        owner_axis = np.zeros(n, dtype=np.uint8)
    if owner_index is None:
        owner_index = np.zeros(n, dtype=np.int64)
    owner_axis = np.asarray(owner_axis)
    owner_index = np.asarray(owner_index)
    if n == 0:
        feats = Tensor(np.zeros((0, vq.channels), dtype=vq.vx.data.dtype))
        return SparseHrSet(coords_np, feats, owner_axis, owner_index)
    if coords_t is not None:
        xs = slice_axis(coords_t, 1, 0, 1)
        ys = slice_axis(coords_t, 1, 1, 2)
    else:
        xs, ys = coords_np[:, 0], coords_np[:, 1]
    fx = sample_vector(vq.vx, xs)
    fy = sample_vector(vq.vy, ys)
    feats = fx + fy if vq.combine == "add" else fx * fy
    return SparseHrSet(coords_np.copy(), feats, owner_axis, owner_index, coords_t)


def sample_pe(vq: VectorQueryPair, coords) -> tuple[Tensor, Tensor]:
    """Positional embeddings sampled at each coordinate's x and y components."""
    if isinstance(coords, Tensor):
        coords = coords.data
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    pe_x = sample_vector(vq.pex, coords[:, 0])
    pe_y = sample_vector(vq.pey, coords[:, 1])
    return pe_x, pe_y
