"""Vector query scattering: objectness heatmap, directional top-k proposals,
learned deformable offsets, and LR-HR pre-fusion of the sparse HR set.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidTarget, ShapeError
from .geometry import BevSpec, world_to_hr_cell, world_to_lr_cell
from .nn import Conv2d, Linear, Mlp, Module
from .numerics import Tensor, bilinear_sample, concat, log_sigmoid, slice_axis, tensor
from .vectorrep import AXIS_X, AXIS_Y, SparseHrSet, VectorQueryPair, compose_sparse_hr
from . import boxes as boxmod

__all__ = [
    "Heatmap",
    "ScatterConfig",
    "HeatmapParams",
    "OffsetParams",
    "PrefuseParams",
    "predict_heatmap",
    "heatmap_loss",
    "select_topk_directional",
    "deform_offsets",
    "prefuse_lr_hr",
    "build_gt_heatmap",
]


@dataclass
class Heatmap:
    probs: Tensor           # [h_hr, w_hr] in (0, 1); sigmoid of logits_full
    logits_h: Tensor        # [h_hr, w_hr] factorized term
    logits_hprime: Tensor   # [h_lr, w_lr] conv refinement term
    logits_full: Tensor     # [h_hr, w_hr] logits_h + upsampled logits_hprime


@dataclass
class ScatterConfig:
    k: int = 3
    delta: int = 2
    offset_scale: float = 3.0
    offsets_on: bool = True
    prefusion_on: bool = True

    def __post_init__(self):
        if self.k < 1 or self.delta < 1 or self.offset_scale <= 0:
            raise ShapeError("need k >= 1, delta >= 1, offset_scale > 0")


class HeatmapParams(Module):
    """Factorized heatmap head plus the LR conv refinement path."""

    def __init__(self, C: int, rng: np.random.Generator):
        self.mlp_x = Mlp([C, C, C, C], rng)
        self.mlp_y = Mlp([C, C, C, C], rng)
        self.conv1 = Conv2d(C, max(1, C // 4), 3, rng)
        self.conv2 = Conv2d(max(1, C // 4), 1, 3, rng)


class OffsetParams(Module):
    def __init__(self, C: int, delta: int, rng: np.random.Generator):
        self.mlp = Mlp([C, C, delta * 2], rng, zero_init_last=True)


class PrefuseParams(Module):
    def __init__(self, C: int, rng: np.random.Generator):
        self.fuse = Linear(2 * C, C, rng)


_upsample_cache: dict[tuple[int, int, int, int], np.ndarray] = {}


def _hr_centers_in_lr(h_hr: int, w_hr: int, h_lr: int, w_lr: int) -> np.ndarray:
    key = (h_hr, w_hr, h_lr, w_lr)
    if key not in _upsample_cache:
        ys, xs = np.mgrid[0:h_hr, 0:w_hr]
        coords = np.stack([(xs + 0.5) * (w_lr / w_hr),
                           (ys + 0.5) * (h_lr / h_hr)], axis=-1)
        _upsample_cache[key] = coords.reshape(-1, 2)
    return _upsample_cache[key]


def predict_heatmap(vq: VectorQueryPair, bev_lr: Tensor,
                    params: HeatmapParams) -> Heatmap:
    """Objectness map over the HR grid.

    Factorized logits come from the outer product of two MLP projections of
    the vector queries; a two-layer conv on the LR BEV adds a dense
    refinement, bilinearly upsampled to HR before the sigmoid.
    """
    if bev_lr.ndim != 3 or bev_lr.shape[2] != vq.channels:
        raise ShapeError(f"LR BEV {bev_lr.shape} does not match C={vq.channels}")
    h_lr, w_lr, _ = bev_lr.shape
    px = params.mlp_x(vq.vx)                       # [w_hr, C]
    py = params.mlp_y(vq.vy)                       # [h_hr, C]
    logits_h = (px @ py.transpose()).transpose()   # [h_hr, w_hr]
    hprime = params.conv2(params.conv1(bev_lr).relu())  # [h_lr, w_lr, 1]
    logits_hprime = hprime.reshape(h_lr, w_lr)
    coords = _hr_centers_in_lr(vq.h_hr, vq.w_hr, h_lr, w_lr)
    up = bilinear_sample(hprime, tensor(coords)).reshape(vq.h_hr, vq.w_hr)
    logits = logits_h + up
    return Heatmap(probs=logits.sigmoid(), logits_h=logits_h,
                   logits_hprime=logits_hprime, logits_full=logits)


def _gaussian_focal(logits: Tensor, gt: np.ndarray) -> Tensor:
    """CenterNet-form focal loss on logits against a soft target map.

    Positives are cells where gt == 1 exactly; elsewhere the penalty is
    damped by (1-gt)^4. Stable log-sigmoid keeps the loss exactly zero
    when saturated logits match a hard {0,1} target.
    """
    gt = np.asarray(gt, dtype=np.float64)
    if gt.min() < 0 or gt.max() > 1:
        raise InvalidTarget("heatmap target values must lie in [0, 1]")
    if gt.shape != logits.shape:
        raise ShapeError(f"target shape {gt.shape} != logits shape {logits.shape}")
    pos = (gt == 1.0)
    p = logits.sigmoid()
    log_p = log_sigmoid(logits)
    log_1mp = log_sigmoid(-logits)
    pos_term = (1 - p) ** 2.0 * log_p * pos.astype(np.float64)
    neg_term = p ** 2.0 * log_1mp * ((1 - gt) ** 4 * (~pos))
    n_pos = max(1.0, float(pos.sum()))
    return -(pos_term + neg_term).sum() * (1.0 / n_pos)


def heatmap_loss(hm: Heatmap, gt: np.ndarray, gt_lr: np.ndarray) -> Tensor:
    """Sum of gaussian focal losses on the HR map and the LR conv path."""
    return _gaussian_focal(hm.logits_full, gt) + _gaussian_focal(hm.logits_hprime, gt_lr)


def select_topk_directional(hm: Heatmap, k: int):
    """Per-column and per-row top-k proposal coordinates.

    Column x contributes its k best rows as entries owned by vx cell x;
    row y contributes its k best columns owned by vy cell y. Ties pick the
    smaller index; indices are detached from the gradient graph.
    """
    probs = hm.probs.data
    h_hr, w_hr = probs.shape
    if k > min(h_hr, w_hr):
        raise ShapeError(f"k={k} exceeds grid extent {probs.shape}")
    col_rows = np.argsort(-probs, axis=0, kind="stable")[:k, :]   # [k, w]
    row_cols = np.argsort(-probs, axis=1, kind="stable")[:, :k]   # [h, k]

    xs = np.repeat(np.arange(w_hr), k)
    ys = col_rows.T.reshape(-1)
    coords_x = np.stack([xs + 0.5, ys + 0.5], axis=1)

    ys2 = np.repeat(np.arange(h_hr), k)
    xs2 = row_cols.reshape(-1)
    coords_y = np.stack([xs2 + 0.5, ys2 + 0.5], axis=1)

    coords = np.concatenate([coords_x, coords_y], axis=0)
    owner_axis = np.concatenate([np.full(w_hr * k, AXIS_X, dtype=np.uint8),
                                 np.full(h_hr * k, AXIS_Y, dtype=np.uint8)])
    owner_index = np.concatenate([xs, ys2]).astype(np.int64)
    return coords, owner_axis, owner_index


def deform_offsets(vq: VectorQueryPair, c_topk: np.ndarray,
                   owner_axis: np.ndarray, owner_index: np.ndarray,
                   params: OffsetParams | None, cfg: ScatterConfig):
    """Expand each proposal into delta offset positions.

    Offsets come from an MLP over the composed proposal features, bounded
    by offset_scale through tanh, and stay differentiable so gradients
    reach the MLP through later sampling at these coordinates. With
    offsets_on=False the proposals are repeated unchanged.
    """
    delta = cfg.delta
    base = np.repeat(c_topk, delta, axis=0)
    axis_d = np.repeat(owner_axis, delta)
    index_d = np.repeat(owner_index, delta)
    if not cfg.offsets_on or params is None:
        return tensor(base), axis_d, index_d
    topk_set = compose_sparse_hr(vq, c_topk)
    raw = params.mlp(topk_set.feats)                       # [n, delta*2]
    off = raw.tanh() * cfg.offset_scale
    off = off.reshape(base.shape[0], 2)
    coords = tensor(base) + off
    cx = slice_axis(coords, 1, 0, 1).clamp(0.0, float(vq.w_hr))
    cy = slice_axis(coords, 1, 1, 2).clamp(0.0, float(vq.h_hr))
    return concat([cx, cy], axis=1), axis_d, index_d


def prefuse_lr_hr(bev_lr: Tensor, hr_set: SparseHrSet, params: PrefuseParams,
                  spec: BevSpec) -> SparseHrSet:
    """Fuse the spatially aligned LR sample into each sparse HR entry."""
    if bev_lr.ndim != 3:
        raise ShapeError(f"LR BEV must be [h, w, C], got {bev_lr.shape}")
    scale = tensor(np.array([[spec.w_lr / spec.w_hr, spec.h_lr / spec.h_hr]]))
    c_lr = hr_set.coords_tensor() * scale
    b_sp = bilinear_sample(bev_lr, c_lr)
    fused = params.fuse(concat([b_sp, hr_set.feats], axis=1))
    return hr_set.replace_feats(fused)


# ---------------------------------------------------------------------------
# ground-truth targets
# ---------------------------------------------------------------------------

def _draw_gaussian(heatmap: np.ndarray, cx: int, cy: int, radius: int) -> None:
    h, w = heatmap.shape
    sigma = (2 * radius + 1) / 6.0
    y0, y1 = max(0, cy - radius), min(h, cy + radius + 1)
    x0, x1 = max(0, cx - radius), min(w, cx + radius + 1)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    patch = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma * sigma))
    np.maximum(heatmap[y0:y1, x0:x1], patch, out=heatmap[y0:y1, x0:x1])


def build_gt_heatmap(boxes: np.ndarray, spec: BevSpec, grid: str = "hr") -> np.ndarray:
    """Gaussian objectness target; peak exactly 1 at each box center cell.

    Radius is half the smaller BEV footprint extent in cells, at least 1.
    Boxes centered outside the grid are skipped.
    """
    if grid == "hr":
        h, w = spec.h_hr, spec.w_hr
        to_cell = lambda xy: world_to_hr_cell(spec, xy)
    elif grid == "lr":
        h, w = spec.h_lr, spec.w_lr
        to_cell = lambda xy: world_to_lr_cell(spec, xy)
    else:
        raise ShapeError(f"grid must be 'hr' or 'lr', got {grid!r}")
    out = np.zeros((h, w), dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, boxmod.BOX_DIM)
    if boxes.shape[0] == 0:
        return out
    centers = to_cell(boxes[:, [boxmod.X, boxmod.Y]])
    x_min, x_max, y_min, y_max = spec.range
    cell_x = (x_max - x_min) / w
    cell_y = (y_max - y_min) / h
    for b, (cx, cy) in zip(boxes, centers):
        ix, iy = int(np.floor(cx)), int(np.floor(cy))
        if not (0 <= ix < w and 0 <= iy < h):
            continue
        fx = b[boxmod.L] / cell_x
        fy = b[boxmod.W] / cell_y
        radius = max(1, int(round(0.5 * min(fx, fy))))
        _draw_gaussian(out, ix, iy, radius)
    return out
