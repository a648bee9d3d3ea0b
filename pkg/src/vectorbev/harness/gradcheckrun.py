"""Gradient-check suite over every differentiable stage.

Each entry builds a small seeded instance of one op or chain and compares
analytic gradients against central differences. Coordinates are kept a
safe distance from integer sampling breakpoints (bilinear interpolation
is only piecewise smooth), usually by shrinking learned offsets.

A deliberately wrong gradient is run as a negative control; the suite
only counts as passing when the real entries pass and the control fails.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..attention import (DeformAttnParams, GatherParams, ScaParams,
                         TemporalParams, deformable_attention,
                         gather_vector_queries, postfuse_lr_hr,
                         spatial_cross_attention, temporal_bev_fusion,
                         temporal_vector_fusion)
from ..geometry import BevSpec, make_rig, se3, yaw_rot2d
from ..model import Decoder, DetSet, Ffn, ModelConfig, SelfAttnParams, \
    detection_loss
from ..numerics import (Tensor, bilinear_sample, check_gradients, concat,
                        deform_sample, gather_rows, layer_norm, log_sigmoid,
                        matmul, pad2d, scatter_rows_add, slice_axis, softmax,
                        softplus, tensor, using_precision)
from ..scattering import (HeatmapParams, OffsetParams, PrefuseParams,
                          ScatterConfig, _gaussian_focal, deform_offsets,
                          heatmap_loss, predict_heatmap, prefuse_lr_hr)
from ..vectorrep import AXIS_X, AXIS_Y, SparseHrSet, VectorQueryPair, \
    compose_sparse_hr, init_vector_queries

__all__ = ["Entry", "CheckResult", "ENTRIES", "run_suite", "suite_ok"]


@dataclass
class Entry:
    name: str
    builder: Callable[[np.random.Generator], tuple[Callable[[], Tensor],
                                                   Sequence[tuple[str, Tensor]]]]
    tol: float = 1e-4
    eps: float = 1e-5
    sample: int | None = None
    expect_fail: bool = False


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel_err: float
    tol: float
    ok: bool
    expect_fail: bool = False


def _p(rng, *shape, lo=-1.0, hi=1.0):
    return tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _safe_coords(rng, n, w, h):
    """Fractional positions at least 0.2 cells from any integer line."""
    xs = rng.integers(0, w, size=n) + rng.uniform(0.25, 0.75, size=n)
    ys = rng.integers(0, h, size=n) + rng.uniform(0.25, 0.75, size=n)
    return np.stack([xs, ys], axis=1).astype(np.float64)


def _shrink_offsets(module, rng, scale=0.02):
    """Replace zero-init offset weights with small values so offset
    gradients are exercised while samples stay near safe positions."""
    for _, p in module.named_parameters():
        if np.all(p.data == 0):
            p.data[...] = rng.uniform(-scale, scale, size=p.data.shape)


def _weighted(rng, t: Tensor) -> Tensor:
    w = tensor(rng.uniform(-1, 1, size=t.shape))
    return (t * w).sum()


def _vq(rng, w=6, h=5, C=8):
    vq = init_vector_queries(w, h, C, seed=int(rng.integers(1 << 30)))
    for v in (vq.vx, vq.vy, vq.pex, vq.pey):
        v.data[...] = rng.uniform(-0.8, 0.8, size=v.data.shape)
    return vq


def _vq_params(vq):
    return [("vx", vq.vx), ("vy", vq.vy), ("pex", vq.pex), ("pey", vq.pey)]


# --- builders ---------------------------------------------------------------

def _b_elementwise(rng):
    x = _p(rng, 3, 4, lo=0.5, hi=1.5)
    y = _p(rng, 3, 4, lo=0.5, hi=1.5)

    def f():
        z = x * y + x / (y + 2.0) - (x - y) * 0.5
        z = z + (x ** 3) * 0.1 + (y + 2.0).sqrt() + (x * y).exp() * 0.05
        z = z + (x + 0.5).log() + z.clamp(-5.0, 5.0) * 0.25
        return z.mean() + (z.sum() * 0.01)
    return f, [("x", x), ("y", y)]


def _b_activations(rng):
    x = tensor(rng.uniform(0.2, 1.0, size=(3, 5))
               * rng.choice([-1.0, 1.0], size=(3, 5)), requires_grad=True)
    w = tensor(rng.uniform(-1, 1, size=(3, 5)))

    def f():
        z = x.relu() + x.tanh() + x.sigmoid() + softplus(x) + log_sigmoid(x)
        return (z.abs() * w).sum()
    return f, [("x", x)]


def _b_matmul(rng):
    A = _p(rng, 4, 3)
    B = _p(rng, 3, 5)
    Cb = _p(rng, 2, 5, 3)
    w = tensor(rng.uniform(-1, 1, size=(2, 4, 3)))

    def f():
        flat = matmul(A, B).transpose(1, 0).reshape(20).reshape(4, 5)
        batched = matmul(flat.reshape(1, 4, 5) + tensor(np.zeros((2, 4, 5))), Cb)
        return (batched * w).sum() + flat.mean()
    return f, [("A", A), ("B", B), ("C", Cb)]


def _b_softmax_layernorm(rng):
    x = _p(rng, 4, 6)
    gain = _p(rng, 6, lo=0.5, hi=1.5)
    bias = _p(rng, 6, lo=-0.3, hi=0.3)
    w = tensor(rng.uniform(-1, 1, size=(4, 6)))

    def f():
        s = softmax(x * 2.0, axis=1)
        ln = layer_norm(x + s, gain, bias)
        return (ln * w).sum() + (s * w).sum()
    return f, [("x", x), ("gain", gain), ("bias", bias)]


def _b_structural(rng):
    x = _p(rng, 5, 4)
    y = _p(rng, 3, 4)
    idx = rng.integers(0, 5, size=6)
    sidx = rng.integers(0, 5, size=3)
    w = tensor(rng.uniform(-1, 1, size=(6, 4)))

    def f():
        g = gather_rows(concat([x, y], axis=0), idx)
        base = scatter_rows_add(x, sidx, y)
        grid = base.reshape(5, 4, 1)
        padded = pad2d(grid, 1)
        return (g * w).sum() + padded.sum() * 0.5 \
            + slice_axis(base, 0, 1, 4).mean()
    return f, [("x", x), ("y", y)]


def _b_bilinear(rng):
    grid = _p(rng, 5, 6, 3)
    coords = tensor(_safe_coords(rng, 7, 6, 5), requires_grad=True)
    w = tensor(rng.uniform(-1, 1, size=(7, 3)))

    def f():
        return (bilinear_sample(grid, coords) * w).sum()
    return f, [("grid", grid), ("coords", coords)]


def _b_deform_sample(rng):
    value = _p(rng, 6, 7, 4)
    xy = tensor(_safe_coords(rng, 5 * 2 * 2, 7, 6).reshape(5, 2, 2, 2),
                requires_grad=True)
    wgt = _p(rng, 5, 2, 2, lo=0.1, hi=1.0)
    w = tensor(rng.uniform(-1, 1, size=(5, 4)))

    def f():
        return (deform_sample(value, xy, wgt) * w).sum()
    return f, [("value", value), ("xy", xy), ("w", wgt)]


def _compose_builder(combine):
    def build(rng):
        vq = _vq(rng)
        vq.combine = combine
        coords = tensor(_safe_coords(rng, 9, vq.w_hr, vq.h_hr),
                        requires_grad=True)
        ax = np.array([AXIS_X, AXIS_Y] * 4 + [AXIS_X])
        ix = np.zeros(9, dtype=np.int64)
        w = tensor(rng.uniform(-1, 1, size=(9, vq.channels)))

        def f():
            s = compose_sparse_hr(vq, coords, ax, ix)
            return (s.feats * w).sum()
        return f, _vq_params(vq) + [("coords", coords)]
    return build


def _b_heatmap(rng):
    C = 8
    spec = BevSpec(h_lr=3, w_lr=4, h_hr=5, w_hr=6)
    vq = _vq(rng, w=6, h=5, C=C)
    params = HeatmapParams(C, np.random.default_rng(rng.integers(1 << 30)))
    bev = _p(rng, 3, 4, C)
    gt = rng.uniform(0.0, 0.95, size=(5, 6))
    gt[2, 3] = 1.0
    gt_lr = rng.uniform(0.0, 0.95, size=(3, 4))
    gt_lr[1, 1] = 1.0

    def f():
        hm = predict_heatmap(vq, bev, params)
        return heatmap_loss(hm, gt, gt_lr)
    return f, _vq_params(vq) + list(params.named_parameters()) + [("bev", bev)]


def _b_offsets(rng):
    vq = _vq(rng)
    cfg = ScatterConfig(k=2, delta=2, offset_scale=0.1, offsets_on=True,
                        prefusion_on=False)
    params = OffsetParams(vq.channels, cfg.delta,
                          np.random.default_rng(rng.integers(1 << 30)))
    _shrink_offsets(params, rng)
    c_topk = _safe_coords(rng, 6, vq.w_hr, vq.h_hr)
    ax = np.array([AXIS_X] * 3 + [AXIS_Y] * 3)
    ix = np.array([0, 1, 2, 0, 1, 2], dtype=np.int64)
    w = tensor(rng.uniform(-1, 1, size=(12, vq.channels)))

    def f():
        coords, ax_d, ix_d = deform_offsets(vq, c_topk, ax, ix, params, cfg)
        s = compose_sparse_hr(vq, coords, ax_d, ix_d)
        return (s.feats * w).sum()
    return f, _vq_params(vq) + list(params.named_parameters())


def _b_prefuse(rng):
    vq = _vq(rng)
    spec = BevSpec(h_lr=3, w_lr=4, h_hr=vq.h_hr, w_hr=vq.w_hr)
    params = PrefuseParams(vq.channels,
                           np.random.default_rng(rng.integers(1 << 30)))
    bev = _p(rng, 3, 4, vq.channels)
    w = tensor(rng.uniform(-1, 1, size=(10, vq.channels)))
    coords = tensor(_safe_coords(rng, 10, vq.w_hr, vq.h_hr), requires_grad=True)
    ax = np.array([AXIS_X] * 5 + [AXIS_Y] * 5)
    ix = np.arange(10, dtype=np.int64) % 5

    def f():
        s = compose_sparse_hr(vq, coords, ax, ix)
        fused = prefuse_lr_hr(bev, s, params, spec)
        return (fused.feats * w).sum()
    return f, _vq_params(vq) + list(params.named_parameters()) \
        + [("bev", bev), ("coords", coords)]


def _b_deform_attn(rng):
    C, heads, points = 8, 2, 2
    p = DeformAttnParams(C, heads, points,
                         np.random.default_rng(rng.integers(1 << 30)))
    _shrink_offsets(p, rng)
    q = _p(rng, 5, C)
    grid = _p(rng, 4, 6, C)
    refs = tensor(_safe_coords(rng, 5, 6, 4), requires_grad=True)
    w = tensor(rng.uniform(-1, 1, size=(5, C)))

    def f():
        return (deformable_attention(q, refs, grid, p) * w).sum()
    return f, [("q", q), ("grid", grid), ("refs", refs)] \
        + list(p.named_parameters())


def _b_sca(rng):
    C = 8
    spec = BevSpec(h_lr=3, w_lr=3, h_hr=6, w_hr=6,
                   range=(-8.0, 8.0, -8.0, 8.0), z_levels=(0.0, 1.5))
    rig = make_rig(n_cams=2, fov_deg=110.0, image_w=8, image_h=8)
    vq = _vq(rng, w=6, h=6, C=C)
    p = ScaParams(C, 2, 2, np.random.default_rng(rng.integers(1 << 30)))
    _shrink_offsets(p, rng)
    lr_q = _p(rng, 9, C)
    cams = [_p(rng, 8, 8, C) for _ in range(2)]
    coords = _safe_coords(rng, 12, 6, 6)
    ax = np.concatenate([np.full(6, AXIS_X), np.full(6, AXIS_Y)])
    ix = np.concatenate([np.arange(6), np.arange(6)]).astype(np.int64)
    w = tensor(rng.uniform(-1, 1, size=(9, C)))
    w2 = tensor(rng.uniform(-1, 1, size=(12, C)))

    def f():
        s = compose_sparse_hr(vq, coords, ax, ix)
        bev_out, hr_out = spatial_cross_attention(lr_q, s, cams, rig, spec, p)
        return (bev_out * w).sum() + (hr_out.feats * w2).sum()
    return f, [("lr_q", lr_q), ("cam0", cams[0]), ("cam1", cams[1])] \
        + _vq_params(vq) + list(p.named_parameters())


def _b_postfuse(rng):
    C = 8
    spec = BevSpec(h_lr=3, w_lr=4, h_hr=5, w_hr=6)
    vq = _vq(rng, w=6, h=5, C=C)
    p = DeformAttnParams(C, 2, 2, np.random.default_rng(rng.integers(1 << 30)))
    _shrink_offsets(p, rng)
    bev = _p(rng, 12, C)
    coords = tensor(_safe_coords(rng, 8, 6, 5), requires_grad=True)
    ax = np.array([AXIS_X] * 4 + [AXIS_Y] * 4)
    ix = np.arange(8, dtype=np.int64) % 4
    w = tensor(rng.uniform(-1, 1, size=(8, C)))

    def f():
        s = compose_sparse_hr(vq, coords, ax, ix)
        out = postfuse_lr_hr(s, bev, s.coords_tensor(), p, spec)
        return (out.feats * w).sum()
    return f, _vq_params(vq) + [("bev", bev), ("coords", coords)] \
        + list(p.named_parameters())


def _gather_builder(mode):
    def build(rng):
        vq = _vq(rng, w=4, h=3, C=8)
        p = GatherParams(8, 2, np.random.default_rng(rng.integers(1 << 30)))
        g = 2
        ax = np.concatenate([np.full(4 * g, AXIS_X), np.full(3 * g, AXIS_Y)])
        ix = np.concatenate([np.repeat(np.arange(4), g),
                             np.repeat(np.arange(3), g)])
        coords = _safe_coords(rng, 7 * g, 4, 3)
        w = tensor(rng.uniform(-1, 1, size=(4, 8)))
        w2 = tensor(rng.uniform(-1, 1, size=(3, 8)))

        def f():
            s = compose_sparse_hr(vq, coords, ax, ix)
            out = gather_vector_queries(vq, s, p, mode=mode)
            return (out.vx * w).sum() + (out.vy * w2).sum()
        return f, _vq_params(vq) + list(p.named_parameters())
    return build


def _b_temporal_vector(rng):
    vq = _vq(rng, w=4, h=3, C=8)
    prev = _vq(rng, w=4, h=3, C=8)
    p = TemporalParams(8, 2, np.random.default_rng(rng.integers(1 << 30)))
    w = tensor(rng.uniform(-1, 1, size=(4, 8)))
    w2 = tensor(rng.uniform(-1, 1, size=(3, 8)))

    def f():
        out = temporal_vector_fusion(vq, prev, p)
        return (out.vx * w).sum() + (out.vy * w2).sum()
    return f, _vq_params(vq) + [("pvx", prev.vx), ("pvy", prev.vy)] \
        + list(p.named_parameters())


def _b_temporal_bev(rng):
    C = 8
    spec = BevSpec(h_lr=4, w_lr=4, h_hr=8, w_hr=8,
                   range=(-8.0, 8.0, -8.0, 8.0))
    p = TemporalParams(C, 2, np.random.default_rng(rng.integers(1 << 30)))
    cur = _p(rng, 16, C)
    prev = _p(rng, 16, C)
    R = np.eye(3)
    R[:2, :2] = yaw_rot2d(0.13)
    ego_t = se3(np.eye(3), [0.37, -0.61, 0.0])
    ego_prev = se3(R, [0.11, 0.23, 0.0])
    w = tensor(rng.uniform(-1, 1, size=(16, C)))

    def f():
        out = temporal_bev_fusion(cur, prev, ego_t, ego_prev, p, spec)
        return (out * w).sum()
    return f, [("cur", cur), ("prev", prev)] + list(p.named_parameters())


def _b_selfattn_ffn(rng):
    child = np.random.default_rng(rng.integers(1 << 30))
    sa = SelfAttnParams(8, 2, child)
    ffn = Ffn(8, 2, child)
    x = _p(rng, 5, 8)
    pos = _p(rng, 5, 8)
    w = tensor(rng.uniform(-1, 1, size=(5, 8)))

    def f():
        return (ffn(sa(x, pos)) * w).sum()
    return f, [("x", x), ("pos", pos)] + list(sa.named_parameters()) \
        + list(ffn.named_parameters())


def _b_gaussian_focal(rng):
    logits = _p(rng, 5, 6, lo=-2.0, hi=2.0)
    gt = rng.uniform(0.0, 0.9, size=(5, 6))
    gt[2, 2] = 1.0
    gt[4, 1] = 1.0

    def f():
        return _gaussian_focal(logits, gt)
    return f, [("logits", logits)]


def _b_detection_loss(rng):
    cfg = ModelConfig(C=8, n_classes=3)
    M = 7
    logits = _p(rng, M, 3, lo=-2.0, hi=2.0)
    params = _p(rng, M, 10)
    gt_params = rng.uniform(-0.8, 0.8, size=(2, 10))
    gt_classes = np.array([0, 2], dtype=np.int64)

    def f():
        det = DetSet(cls_logits=logits, box_params=params)
        return detection_loss(det, gt_params, gt_classes, cfg)[0]
    return f, [("logits", logits), ("params", params)]


def _b_decoder_chain(rng):
    # One layer: multi-layer refinement detaches the running box estimate
    # by design, which finite differences would wrongly see through.
    cfg = ModelConfig(C=8, h_lr=4, w_lr=4, h_hr=6, w_hr=6, dec_layers=1,
                      heads=2, points=2, n_classes=2, vector_decoding=False)
    dec = Decoder(cfg, np.random.default_rng(rng.integers(1 << 30)))
    for _, p in dec.named_parameters():
        if np.all(p.data == 0):
            p.data[...] = rng.uniform(-0.05, 0.05, size=p.data.shape)
    spec = cfg.bev_spec()
    bev = _p(rng, 16, 8)
    queries = _p(rng, cfg.n_dec_queries, 8)
    wc = tensor(rng.uniform(-1, 1, size=(cfg.n_dec_queries, 2)))
    wb = tensor(rng.uniform(-1, 1, size=(cfg.n_dec_queries, 10)))

    def f():
        sets = dec(bev, queries, spec, cfg)
        total = None
        for det in sets:
            term = (det.cls_logits * wc).sum() + (det.box_params * wb).sum()
            total = term if total is None else total + term
        return total
    return f, [("bev", bev), ("queries", queries)] \
        + list(dec.named_parameters())


def _b_negative_control(rng):
    x = _p(rng, 3, 3, lo=0.5, hi=1.5)

    def broken_square(t: Tensor) -> Tensor:
        def bwd(g):
            if t.requires_grad:
                t._accum(1.7 * t.data * g)
        return Tensor._op("broken_square", t.data * t.data, (t,), bwd)

    def f():
        return broken_square(x).sum()
    return f, [("x", x)]


ENTRIES: list[Entry] = [
    Entry("elementwise", _b_elementwise),
    Entry("activations", _b_activations),
    Entry("matmul_reshape", _b_matmul),
    Entry("softmax_layernorm", _b_softmax_layernorm),
    Entry("gather_scatter_pad", _b_structural),
    Entry("bilinear_sample", _b_bilinear),
    Entry("deform_sample", _b_deform_sample),
    Entry("compose_add", _compose_builder("add")),
    Entry("compose_multiply", _compose_builder("multiply")),
    Entry("heatmap_focal_chain", _b_heatmap, sample=20, eps=1e-6),
    Entry("offset_chain", _b_offsets, sample=24, eps=1e-6),
    Entry("prefuse_chain", _b_prefuse, sample=24, eps=1e-6),
    Entry("deformable_attention", _b_deform_attn, sample=24, eps=1e-6),
    Entry("sca_chain", _b_sca, sample=16, eps=1e-6),
    Entry("postfuse_chain", _b_postfuse, sample=16, eps=1e-6),
    Entry("gather_blocked", _gather_builder("blocked"), sample=20),
    Entry("gather_global", _gather_builder("global"), sample=20),
    Entry("temporal_vector", _b_temporal_vector, sample=20),
    Entry("temporal_bev", _b_temporal_bev, sample=20, eps=1e-6),
    Entry("self_attention", _b_selfattn_ffn, sample=20),
    Entry("gaussian_focal", _b_gaussian_focal),
    Entry("detection_loss", _b_detection_loss, sample=30),
    Entry("decoder_chain", _b_decoder_chain, tol=1e-3, sample=12, eps=1e-6),
    Entry("negative_control", _b_negative_control, expect_fail=True),
]


def run_suite(seeds: Sequence[int], entries: Sequence[Entry] | None = None
              ) -> list[CheckResult]:
    """All entries over all seeds in 64-bit test precision."""
    entries = ENTRIES if entries is None else entries
    results = []
    with using_precision("test"):
        for entry in entries:
            for seed in seeds:
                rng = np.random.default_rng(
                    [seed, zlib.crc32(entry.name.encode())])
                f, params = entry.builder(rng)
                report = check_gradients(f, params, eps=entry.eps,
                                         sample=entry.sample,
                                         rng=np.random.default_rng(seed))
                passed = report.ok(entry.tol)
                results.append(CheckResult(
                    name=entry.name, seed=seed,
                    max_rel_err=report.max_rel_err, tol=entry.tol,
                    ok=(not passed) if entry.expect_fail else passed,
                    expect_fail=entry.expect_fail))
    return results


def suite_ok(results: list[CheckResult]) -> bool:
    return all(r.ok for r in results)
