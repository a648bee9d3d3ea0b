"""Attention stages: deformable sampling attention, joint LR-HR spatial
cross-attention over camera features, LR-HR post-fusion, vector query
gathering, and temporal fusion.
"""
from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError
from .geometry import BevSpec, CameraRig, inv_se3, lr_cell_to_world, make_pillar_points, \
    transform_points, validate_rigid, world_to_lr_cell
from .nn import LayerNorm, Linear, Module
from .numerics import Tensor, bilinear_sample, concat, deform_sample, gather_rows, \
    matmul, scatter_rows_add, slice_axis, softmax, tensor
from .vectorrep import AXIS_X, AXIS_Y, SparseHrSet, VectorQueryPair, sample_pe

__all__ = [
    "DeformAttnParams",
    "ScaParams",
    "GatherParams",
    "TemporalParams",
    "deformable_attention",
    "spatial_cross_attention",
    "postfuse_lr_hr",
    "gather_vector_queries",
    "temporal_vector_fusion",
    "temporal_bev_fusion",
    "lr_cell_centers",
]


class DeformAttnParams(Module):
    """Query-conditioned offsets and point weights over a value grid.

    Offset and weight projections start at zero: sampling begins at the
    reference point with uniform weights, the standard stable init.
    """

    def __init__(self, C: int, heads: int, points: int, rng: np.random.Generator):
        if C % heads != 0:
            raise ShapeError(f"channels {C} not divisible by heads {heads}")
        self.heads = heads
        self.points = points
        self.off = Linear(C, heads * points * 2, rng, zero_init=True)
        self.att = Linear(C, heads * points, rng, zero_init=True)
        self.value = Linear(C, C, rng)
        self.out = Linear(C, C, rng)


class ScaParams(Module):
    def __init__(self, C: int, heads: int, points: int, rng: np.random.Generator):
        self.deform = DeformAttnParams(C, heads, points, rng)
        self.ln = LayerNorm(C)


class GatherParams(Module):
    def __init__(self, C: int, heads: int, rng: np.random.Generator):
        if C % heads != 0:
            raise ShapeError(f"channels {C} not divisible by heads {heads}")
        self.heads = heads
        self.q_proj = Linear(C, C, rng)
        self.k_proj = Linear(C, C, rng)
        self.v_proj = Linear(C, C, rng)
        self.out_proj = Linear(C, C, rng)
        self.ln = LayerNorm(C)


class TemporalParams(Module):
    def __init__(self, C: int, heads: int, rng: np.random.Generator):
        if C % heads != 0:
            raise ShapeError(f"channels {C} not divisible by heads {heads}")
        self.heads = heads
        self.q_proj = Linear(C, C, rng)
        self.k_proj = Linear(C, C, rng)
        self.v_proj = Linear(C, C, rng)
        self.out_proj = Linear(C, C, rng)


def deformable_attention(queries: Tensor, ref_coords, value_grid: Tensor,
                         p: DeformAttnParams) -> Tensor:
    """Per query: sample `points` offset positions per head around the
    reference, mix by softmaxed learned weights, project the concatenated
    heads. Differentiable in queries, grid, and reference coordinates.
    """
    if queries.ndim != 2 or value_grid.ndim != 3:
        raise ShapeError("deformable_attention expects [N,C] queries and [H,W,C] grid")
    n, C = queries.shape
    if value_grid.shape[2] != C:
        raise ShapeError(f"grid channels {value_grid.shape[2]} != query channels {C}")
    H, W, _ = value_grid.shape
    v = p.value(value_grid.reshape(H * W, C)).reshape(H, W, C)
    off = p.off(queries).reshape(n, p.heads, p.points, 2)
    att = softmax(p.att(queries).reshape(n, p.heads, p.points), axis=2)
    if not isinstance(ref_coords, Tensor):
        ref_coords = tensor(np.asarray(ref_coords))
    coords = ref_coords.reshape(n, 1, 1, 2) + off
    return p.out(deform_sample(v, coords, att))


def lr_cell_centers(spec: BevSpec) -> np.ndarray:
    """Cell-center coordinates of the LR grid, row-major [h_lr*w_lr, 2]."""
    ys, xs = np.mgrid[0:spec.h_lr, 0:spec.w_lr]
    return np.stack([xs + 0.5, ys + 0.5], axis=-1).reshape(-1, 2).astype(np.float64)


def spatial_cross_attention(lr_queries: Tensor, hr_set: SparseHrSet | None,
                            cam_feats: list[Tensor], rig: CameraRig,
                            spec: BevSpec, p: ScaParams) -> tuple[Tensor, SparseHrSet | None]:
    """Joint deformable cross-attention of LR and sparse HR queries into
    the camera features, shared weights.

    Each query lifts to pillar points, projects into every camera, and
    attends at every visible projection; contributions are averaged over
    (camera, level) hits. Zero-hit queries pass through unchanged;
    hit queries get residual + layer norm.
    """
    n_lr = lr_queries.shape[0]
    if hr_set is not None and hr_set.feats.shape[0] > 0:
        q = concat([lr_queries, hr_set.feats], axis=0)
        pts = np.concatenate([
            make_pillar_points(spec, lr_cell_centers(spec), "lr"),
            make_pillar_points(spec, hr_set.coords, "hr"),
        ], axis=0)
    else:
        q = lr_queries
        pts = make_pillar_points(spec, lr_cell_centers(spec), "lr")
    N = q.shape[0]
    C = q.shape[1]
    Z = pts.shape[1]
    flat_pts = pts.reshape(-1, 3)

    off2 = p.deform.off(q)                                   # [N, heads*points*2]
    att2 = softmax(p.deform.att(q).reshape(N, p.deform.heads, p.deform.points),
                   axis=2).reshape(N, p.deform.heads * p.deform.points)

    agg = Tensor(np.zeros((N, C), dtype=q.data.dtype))
    hits = np.zeros(N, dtype=np.int64)
    for feat, cam in zip(cam_feats, rig.cameras):
        Hc, Wc, _ = feat.shape
        v = p.deform.value(feat.reshape(Hc * Wc, C)).reshape(Hc, Wc, C)
        uv, vis = cam.project(flat_pts)
        uv = uv.reshape(N, Z, 2)
        vis = vis.reshape(N, Z)
        for z in range(Z):
            idx = np.nonzero(vis[:, z])[0]
            if idx.size == 0:
                continue
            m = idx.size
            q_off = gather_rows(off2, idx).reshape(m, p.deform.heads, p.deform.points, 2)
            q_att = gather_rows(att2, idx).reshape(m, p.deform.heads, p.deform.points)
            refs = tensor(uv[idx, z])
            coords = refs.reshape(m, 1, 1, 2) + q_off
            sampled = deform_sample(v, coords, q_att)
            agg = scatter_rows_add(agg, idx, sampled)
            hits[idx] += 1

    inv = tensor(1.0 / np.maximum(hits, 1)[:, None])
    out = p.deform.out(agg * inv)
    mask = tensor((hits > 0).astype(np.float64)[:, None])
    fused = p.ln(q + out) * mask + q * (1.0 - mask)
    if hr_set is None or hr_set.feats.shape[0] == 0:
        return fused, hr_set
    bev_out = slice_axis(fused, 0, 0, n_lr)
    hr_out = hr_set.replace_feats(slice_axis(fused, 0, n_lr, N))
    return bev_out, hr_out


def postfuse_lr_hr(hr_sca: SparseHrSet, bev_sca: Tensor, c_deform,
                   p: DeformAttnParams, spec: BevSpec) -> SparseHrSet:
    """Deformable read of the post-SCA LR BEV at each sparse entry's
    aligned position, added through a skip connection (no norm: with a
    zero output projection the set passes through exactly).
    """
    grid = bev_sca.reshape(spec.h_lr, spec.w_lr, bev_sca.shape[1])
    if not isinstance(c_deform, Tensor):
        c_deform = tensor(np.asarray(c_deform))
    scale = tensor(np.array([[spec.w_lr / spec.w_hr, spec.h_lr / spec.h_hr]]))
    refs = c_deform * scale
    out = deformable_attention(hr_sca.feats, refs, grid, p) + hr_sca.feats
    return hr_sca.replace_feats(out)


def _check_block_structure(hr_post: SparseHrSet, w_hr: int, h_hr: int) -> int:
    """Verify X-first ordering with a uniform, contiguous group size."""
    N = hr_post.feats.shape[0]
    M = w_hr + h_hr
    if N == 0 or N % M != 0:
        raise ContractError(f"{N} entries do not split evenly over {M} vector cells")
    G = N // M
    n_x = w_hr * G
    ax = hr_post.owner_axis
    ix = hr_post.owner_index
    if not (np.all(ax[:n_x] == AXIS_X) and np.all(ax[n_x:] == AXIS_Y)):
        raise ContractError("entries must be ordered vx-owned first, then vy-owned")
    if not (np.array_equal(ix[:n_x], np.repeat(np.arange(w_hr), G))
            and np.array_equal(ix[n_x:], np.repeat(np.arange(h_hr), G))):
        raise ContractError("entries of each vector cell must be contiguous and in order")
    return G


def gather_vector_queries(vq: VectorQueryPair, hr_post: SparseHrSet,
                          p: GatherParams, mode: str = "blocked",
                          pe_on: bool = True) -> VectorQueryPair:
    """Cross-attend the vector queries over the learned sparse HR entries.

    Queries carry their own positional embeddings; each key carries the
    embedding of its collapsing axis (pe_y for vx-owned entries, pe_x for
    vy-owned). Blocked mode restricts each vector cell to its own entries;
    global mode attends over all of them.
    """
    if mode not in ("blocked", "global"):
        raise ContractError(f"unknown gather mode {mode!r}")
    w, h = vq.w_hr, vq.h_hr
    M = w + h
    G = _check_block_structure(hr_post, w, h)
    N = M * G
    C = vq.channels
    heads = p.heads
    d = C // heads

    q = concat([vq.vx, vq.vy], axis=0)
    keys = hr_post.feats
    if pe_on:
        pe_x_s, pe_y_s = sample_pe(vq, hr_post.coords)
        n_x = w * G
        k_pos = concat([slice_axis(pe_y_s, 0, 0, n_x),
                        slice_axis(pe_x_s, 0, n_x, N)], axis=0)
        Q = p.q_proj(q + concat([vq.pex, vq.pey], axis=0))
        K = p.k_proj(keys + k_pos)
    else:
        Q = p.q_proj(q)
        K = p.k_proj(keys)
    V = p.v_proj(keys)
    scale = 1.0 / np.sqrt(d)

    if mode == "blocked":
        Qb = Q.reshape(M, heads, d).reshape(M * heads, 1, d)
        Kb = K.reshape(M, G, heads, d).transpose(0, 2, 1, 3).reshape(M * heads, G, d)
        Vb = V.reshape(M, G, heads, d).transpose(0, 2, 1, 3).reshape(M * heads, G, d)
        scores = matmul(Qb, Kb.transpose(0, 2, 1)) * scale
        att = softmax(scores, axis=2)
        out = matmul(att, Vb).reshape(M, heads, d).reshape(M, C)
    else:
        Qg = Q.reshape(M, heads, d).transpose(1, 0, 2)
        Kg = K.reshape(N, heads, d).transpose(1, 0, 2)
        Vg = V.reshape(N, heads, d).transpose(1, 0, 2)
        scores = matmul(Qg, Kg.transpose(0, 2, 1)) * scale
        att = softmax(scores, axis=2)
        out = matmul(att, Vg).transpose(1, 0, 2).reshape(M, C)

    fused = p.ln(q + p.out_proj(out))
    vx = slice_axis(fused, 0, 0, w)
    vy = slice_axis(fused, 0, w, M)
    return VectorQueryPair(vx=vx, vy=vy, pex=vq.pex, pey=vq.pey, combine=vq.combine)


def _fuse_with_previous(cur: Tensor, prev: Tensor | None, p: TemporalParams) -> Tensor:
    """Per-cell attention over this cell's {current, previous} pair, then
    average of the attention output with the pre-attention query.
    """
    M, C = cur.shape
    heads = p.heads
    d = C // heads
    if prev is None:
        stacked = cur.reshape(M, 1, C)
        k_count = 1
    else:
        if prev.shape != cur.shape:
            raise ShapeError(f"previous shape {prev.shape} != current {cur.shape}")
        stacked = concat([cur.reshape(M, 1, C), prev.reshape(M, 1, C)], axis=1)
        k_count = 2
    flat = stacked.reshape(M * k_count, C)
    Q = p.q_proj(cur).reshape(M, heads, d).reshape(M * heads, 1, d)
    K = p.k_proj(flat).reshape(M, k_count, heads, d).transpose(0, 2, 1, 3) \
        .reshape(M * heads, k_count, d)
    V = p.v_proj(flat).reshape(M, k_count, heads, d).transpose(0, 2, 1, 3) \
        .reshape(M * heads, k_count, d)
    scores = matmul(Q, K.transpose(0, 2, 1)) * (1.0 / np.sqrt(d))
    att = softmax(scores, axis=2)
    out = matmul(att, V).reshape(M, heads, d).reshape(M, C)
    return (p.out_proj(out) + cur) * 0.5


def temporal_vector_fusion(vq_t: VectorQueryPair, vq_prev: VectorQueryPair | None,
                           p: TemporalParams) -> VectorQueryPair:
    """Fuse each vector cell with its previous-frame counterpart.

    Previous vector queries are used as-is (axis marginals admit no
    principled ego warp); positional embeddings pass through.
    """
    prev_vx = vq_prev.vx if vq_prev is not None else None
    prev_vy = vq_prev.vy if vq_prev is not None else None
    vx = _fuse_with_previous(vq_t.vx, prev_vx, p)
    vy = _fuse_with_previous(vq_t.vy, prev_vy, p)
    return VectorQueryPair(vx=vx, vy=vy, pex=vq_t.pex, pey=vq_t.pey,
                           combine=vq_t.combine)


def temporal_bev_fusion(bev_t: Tensor, bev_prev: Tensor | None,
                        ego_t: np.ndarray, ego_prev: np.ndarray | None,
                        p: TemporalParams, spec: BevSpec) -> Tensor:
    """Warp the previous LR BEV into the current ego frame, then fuse per
    cell as in the vector path.
    """
    if bev_prev is None:
        return _fuse_with_previous(bev_t, None, p)
    validate_rigid(ego_t)
    validate_rigid(ego_prev)
    centers = lr_cell_centers(spec)
    world_xy = lr_cell_to_world(spec, centers)
    pts = np.concatenate([world_xy, np.zeros((world_xy.shape[0], 1))], axis=1)
    rel = inv_se3(ego_prev) @ ego_t
    prev_xy = transform_points(rel, pts)[:, :2]
    prev_cells = world_to_lr_cell(spec, prev_xy)
    grid = bev_prev.reshape(spec.h_lr, spec.w_lr, bev_prev.shape[1])
    warped = bilinear_sample(grid, tensor(prev_cells))
    return _fuse_with_previous(bev_t, warped, p)
