"""Full detector: encoder layers chaining the vector-query stages, a
DETR-style decoder driven by the vector queries, matching, and losses.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import boxes as boxmod
from .attention import (DeformAttnParams, GatherParams, ScaParams, TemporalParams,
                        deformable_attention, gather_vector_queries, postfuse_lr_hr,
                        spatial_cross_attention, temporal_bev_fusion,
                        temporal_vector_fusion)
from .errors import ContractError, ShapeError
from .geometry import BevSpec, CameraRig
from .nn import LayerNorm, Linear, Mlp, Module
from .numerics import Tensor, concat, gather_rows, log_sigmoid, matmul, slice_axis, \
    softmax, tensor
from .scattering import (Heatmap, HeatmapParams, OffsetParams, PrefuseParams,
                         ScatterConfig, build_gt_heatmap, deform_offsets,
                         heatmap_loss, predict_heatmap, prefuse_lr_hr,
                         select_topk_directional)
from .vectorrep import VectorQueryPair, compose_sparse_hr, init_vector_queries

__all__ = [
    "ModelConfig",
    "Model",
    "FrameInputs",
    "EncoderState",
    "ModelOutput",
    "DetSet",
    "hungarian_match",
    "total_loss",
    "decode_detections",
]


@dataclass
class ModelConfig:
    """Flat, fully config-file-addressable model description."""
    C: int = 32
    h_lr: int = 32
    w_lr: int = 32
    h_hr: int = 64
    w_hr: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    points: int = 2
    k: int = 3
    delta: int = 2
    offset_scale: float = 3.0
    combine: str = "add"
    gather_mode: str = "blocked"
    vector_on: bool = True
    heatmap_loss_on: bool = True
    temporal_on: bool = True
    offsets_on: bool = True
    prefusion_on: bool = True
    postfusion_on: bool = True
    pe_on: bool = True
    vector_decoding: bool = True
    intermediate_supervision: bool = True
    ffn_mult: int = 2
    n_classes: int = 3
    lambda_cls: float = 2.0
    lambda_box: float = 0.25
    bev_extent: float = 16.0
    z_min: float = -1.0
    z_max: float = 3.0
    z_count: int = 4
    n_cams: int = 4
    cam_fov_deg: float = 100.0
    cam_size: int = 64
    cam_height: float = 1.5
    init_seed: int = 0

    def bev_spec(self) -> BevSpec:
        e = self.bev_extent
        return BevSpec(h_lr=self.h_lr, w_lr=self.w_lr, h_hr=self.h_hr,
                       w_hr=self.w_hr, range=(-e, e, -e, e),
                       z_levels=tuple(np.linspace(self.z_min, self.z_max, self.z_count)))

    def scatter_config(self) -> ScatterConfig:
        return ScatterConfig(k=self.k, delta=self.delta,
                             offset_scale=self.offset_scale,
                             offsets_on=self.offsets_on,
                             prefusion_on=self.prefusion_on)

    @property
    def n_dec_queries(self) -> int:
        return self.h_hr + self.w_hr

    @property
    def effective_vector_decoding(self) -> bool:
        return self.vector_decoding and self.vector_on

    @property
    def effective_intermediate(self) -> bool:
        return self.intermediate_supervision and self.effective_vector_decoding


@dataclass
class FrameInputs:
    cam_feats: list[Tensor]   # per camera [Hc, Wc, C]
    ego: np.ndarray           # 4x4 ego-to-world


@dataclass
class EncoderState:
    bev: Tensor               # [h_lr*w_lr, C]
    vq: VectorQueryPair
    ego: np.ndarray


@dataclass
class DetSet:
    cls_logits: Tensor        # [M, n_classes]
    box_params: Tensor        # [M, PARAM_DIM], centers already sigmoided


@dataclass
class ModelOutput:
    det_sets: list[DetSet]    # L_d sets (+ one per intermediate encoder layer)
    heatmaps: list[Heatmap]   # one per encoder layer (empty when vector path off)
    state: EncoderState


class Ffn(Module):
    def __init__(self, C: int, mult: int, rng: np.random.Generator):
        self.lin1 = Linear(C, C * mult, rng)
        self.lin2 = Linear(C * mult, C, rng)
        self.ln = LayerNorm(C)

    def __call__(self, x: Tensor) -> Tensor:
        return self.ln(x + self.lin2(self.lin1(x).relu()))


class SelfAttnParams(Module):
    """Full multi-head self-attention with residual + layer norm."""

    def __init__(self, C: int, heads: int, rng: np.random.Generator):
        if C % heads != 0:
            raise ShapeError(f"channels {C} not divisible by heads {heads}")
        self.heads = heads
        self.q_proj = Linear(C, C, rng)
        self.k_proj = Linear(C, C, rng)
        self.v_proj = Linear(C, C, rng)
        self.out_proj = Linear(C, C, rng)
        self.ln = LayerNorm(C)

    def __call__(self, x: Tensor, pos: Tensor) -> Tensor:
        M, C = x.shape
        d = C // self.heads
        xp = x + pos
        Q = self.q_proj(xp).reshape(M, self.heads, d).transpose(1, 0, 2)
        K = self.k_proj(xp).reshape(M, self.heads, d).transpose(1, 0, 2)
        V = self.v_proj(x).reshape(M, self.heads, d).transpose(1, 0, 2)
        scores = matmul(Q, K.transpose(0, 2, 1)) * (1.0 / np.sqrt(d))
        att = softmax(scores, axis=2)
        out = matmul(att, V).transpose(1, 0, 2).reshape(M, C)
        return self.ln(x + self.out_proj(out))


class VectorQueryParams(Module):
    """Trainable initial vector queries and positional embeddings."""

    def __init__(self, cfg: ModelConfig, rng_seed: int):
        pair = init_vector_queries(cfg.w_hr, cfg.h_hr, cfg.C, rng_seed,
                                   combine=cfg.combine)
        self.vx = pair.vx
        self.vy = pair.vy
        if cfg.pe_on:
            self.pex = pair.pex
            self.pey = pair.pey
        else:
            self.pex = Tensor(np.zeros_like(pair.pex.data))
            self.pey = Tensor(np.zeros_like(pair.pey.data))
        self.combine = cfg.combine

    def as_pair(self) -> VectorQueryPair:
        return VectorQueryPair(vx=self.vx, vy=self.vy, pex=self.pex,
                               pey=self.pey, combine=self.combine)


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        C = cfg.C
        if cfg.temporal_on:
            self.t_bev = TemporalParams(C, cfg.heads, rng)
        if cfg.temporal_on and cfg.vector_on:
            self.t_vec = TemporalParams(C, cfg.heads, rng)
        if cfg.vector_on:
            self.heatmap = HeatmapParams(C, rng)
            if cfg.offsets_on:
                self.offsets = OffsetParams(C, cfg.delta, rng)
            if cfg.prefusion_on:
                self.prefuse = PrefuseParams(C, rng)
            if cfg.postfusion_on:
                self.postfuse = DeformAttnParams(C, cfg.heads, cfg.points, rng)
            self.gather = GatherParams(C, cfg.heads, rng)
            self.ffn_vq = Ffn(C, cfg.ffn_mult, rng)
        self.sca = ScaParams(C, cfg.heads, cfg.points, rng)
        self.ffn_bev = Ffn(C, cfg.ffn_mult, rng)

    def __call__(self, state: EncoderState, prev: EncoderState | None,
                 frame: FrameInputs, rig: CameraRig, spec: BevSpec,
                 cfg: ModelConfig) -> tuple[EncoderState, Heatmap | None]:
        bev, vq = state.bev, state.vq
        if cfg.temporal_on:
            bev = temporal_bev_fusion(bev, prev.bev if prev else None,
                                      state.ego, prev.ego if prev else None,
                                      self.t_bev, spec)
            if cfg.vector_on:
                vq = temporal_vector_fusion(vq, prev.vq if prev else None,
                                            self.t_vec)
        hm = None
        if cfg.vector_on:
            grid = bev.reshape(spec.h_lr, spec.w_lr, cfg.C)
            hm = predict_heatmap(vq, grid, self.heatmap)
            c_topk, ax, ix = select_topk_directional(hm, cfg.k)
            scfg = cfg.scatter_config()
            c_deform, axd, ixd = deform_offsets(
                vq, c_topk, ax, ix,
                self.offsets if cfg.offsets_on else None, scfg)
            hr = compose_sparse_hr(vq, c_deform, axd, ixd)
            if cfg.prefusion_on:
                hr = prefuse_lr_hr(grid, hr, self.prefuse, spec)
            bev, hr = spatial_cross_attention(bev, hr, frame.cam_feats, rig,
                                              spec, self.sca)
            if cfg.postfusion_on:
                hr = postfuse_lr_hr(hr, bev, c_deform, self.postfuse, spec)
            vq = gather_vector_queries(vq, hr, self.gather, cfg.gather_mode,
                                       cfg.pe_on)
            vq = VectorQueryPair(vx=self.ffn_vq(vq.vx), vy=self.ffn_vq(vq.vy),
                                 pex=vq.pex, pey=vq.pey, combine=vq.combine)
        else:
            bev, _ = spatial_cross_attention(bev, None, frame.cam_feats, rig,
                                             spec, self.sca)
        bev = self.ffn_bev(bev)
        return EncoderState(bev=bev, vq=vq, ego=state.ego), hm


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        C = cfg.C
        self.self_attn = SelfAttnParams(C, cfg.heads, rng)
        self.cross = DeformAttnParams(C, cfg.heads, cfg.points, rng)
        self.ln_cross = LayerNorm(C)
        self.ffn = Ffn(C, cfg.ffn_mult, rng)


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        C = cfg.C
        M = cfg.n_dec_queries
        self.layers = [DecoderLayer(cfg, rng) for _ in range(cfg.dec_layers)]
        self.query_pos = tensor(rng.normal(0, 0.02, size=(M, C)), requires_grad=True)
        if not cfg.effective_vector_decoding:
            self.query_embed = tensor(rng.normal(0, 0.02, size=(M, C)),
                                      requires_grad=True)
        self.class_head = Linear(C, cfg.n_classes, rng)
        # rare-positive prior keeps early focal loss small
        self.class_head.bias.data[:] = -3.0
        self.box_head = Mlp([C, C, boxmod.PARAM_DIM], rng, zero_init_last=True)

    def __call__(self, bev: Tensor, dec_queries: Tensor, spec: BevSpec,
                 cfg: ModelConfig, init_raw: np.ndarray | None = None
                 ) -> list[DetSet]:
        M = dec_queries.shape[0]
        if M != cfg.n_dec_queries:
            raise ContractError(
                f"decoder expects {cfg.n_dec_queries} queries, got {M}")
        grid = bev.reshape(spec.h_lr, spec.w_lr, cfg.C)
        x = dec_queries
        if init_raw is None:
            raw = np.zeros((M, boxmod.PARAM_DIM))
        else:
            if init_raw.shape != (M, boxmod.PARAM_DIM):
                raise ContractError(
                    f"init_raw must be [{M}, {boxmod.PARAM_DIM}], got {init_raw.shape}")
            raw = init_raw.copy()
        outputs: list[DetSet] = []
        for layer in self.layers:
            x = layer.self_attn(x, self.query_pos)
            centers = 1.0 / (1.0 + np.exp(-raw[:, :2]))
            refs = centers * np.array([spec.w_lr, spec.h_lr])
            x = layer.ln_cross(x + deformable_attention(x, refs, grid, layer.cross))
            x = layer.ffn(x)
            delta = self.box_head(x)
            raw_t = tensor(raw) + delta
            cls = self.class_head(x)
            box_params = concat([slice_axis(raw_t, 1, 0, 2).sigmoid(),
                                 slice_axis(raw_t, 1, 2, boxmod.PARAM_DIM)], axis=1)
            outputs.append(DetSet(cls_logits=cls, box_params=box_params))
            raw = raw_t.data.copy()
        return outputs


def heatmap_seed_raw(probs: np.ndarray) -> np.ndarray:
    """Initial decoder box state from the objectness map.

    Each vx query owns HR column x: its center starts at that column's best
    row (ties to the lowest index). Each vy query starts at its row's best
    column. Peak cell-center fractions pass through inverse sigmoid so the
    first decoder layer refines positions that already track objectness;
    the remaining box parameters start at zero.
    """
    h_hr, w_hr = probs.shape
    raw = np.zeros((w_hr + h_hr, boxmod.PARAM_DIM))
    logit = lambda f: np.log(f) - np.log1p(-f)
    fx = (np.arange(w_hr) + 0.5) / w_hr
    fy = (np.argmax(probs, axis=0) + 0.5) / h_hr
    raw[:w_hr, 0] = logit(fx)
    raw[:w_hr, 1] = logit(fy)
    gx = (np.argmax(probs, axis=1) + 0.5) / w_hr
    gy = (np.arange(h_hr) + 0.5) / h_hr
    raw[w_hr:, 0] = logit(gx)
    raw[w_hr:, 1] = logit(gy)
    return raw


class Model(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed)
        self.vq_params = VectorQueryParams(cfg, cfg.init_seed + 1)
        self.bev_embed = tensor(rng.normal(0, 0.02, size=(cfg.h_lr * cfg.w_lr, cfg.C)),
                                requires_grad=True)
        self.encoder_layers = [EncoderLayer(cfg, rng) for _ in range(cfg.enc_layers)]
        self.decoder = Decoder(cfg, rng)

    def encode_frame(self, frame: FrameInputs, prev: EncoderState | None,
                     rig: CameraRig) -> tuple[EncoderState, list[Heatmap],
                                              list[VectorQueryPair]]:
        cfg = self.cfg
        spec = cfg.bev_spec()
        state = EncoderState(bev=self.bev_embed, vq=self.vq_params.as_pair(),
                             ego=frame.ego)
        heatmaps: list[Heatmap] = []
        vq_layers: list[VectorQueryPair] = []
        for layer in self.encoder_layers:
            state, hm = layer(state, prev, frame, rig, spec, cfg)
            if hm is not None:
                heatmaps.append(hm)
            vq_layers.append(state.vq)
        return state, heatmaps, vq_layers

    def forward(self, frames: list[FrameInputs], rig: CameraRig) -> ModelOutput:
        """Run the encoder over the frame sequence (previous state detached)
        and decode detections from the final frame.
        """
        cfg = self.cfg
        spec = cfg.bev_spec()
        prev: EncoderState | None = None
        state = heatmaps = vq_layers = None
        for frame in frames:
            state, heatmaps, vq_layers = self.encode_frame(frame, prev, rig)
            prev = EncoderState(bev=state.bev.detach(),
                                vq=VectorQueryPair(
                                    vx=state.vq.vx.detach(), vy=state.vq.vy.detach(),
                                    pex=state.vq.pex.detach(), pey=state.vq.pey.detach(),
                                    combine=state.vq.combine),
                                ego=state.ego)
        det_sets: list[DetSet] = []
        if cfg.effective_vector_decoding:
            queries = concat([state.vq.vx, state.vq.vy], axis=0)
            init_raw = heatmap_seed_raw(heatmaps[-1].probs.data) \
                if heatmaps else None
        else:
            queries = self.decoder.query_embed
            init_raw = None
        det_sets.extend(self.decoder(state.bev, queries, spec, cfg, init_raw))
        if cfg.effective_intermediate:
            for i, vq_mid in enumerate(vq_layers[:-1]):
                q_mid = concat([vq_mid.vx, vq_mid.vy], axis=0)
                mid_raw = heatmap_seed_raw(heatmaps[i].probs.data) \
                    if i < len(heatmaps) else init_raw
                det_sets.append(
                    self.decoder(state.bev, q_mid, spec, cfg, mid_raw)[-1])
        return ModelOutput(det_sets=det_sets, heatmaps=heatmaps, state=state)


# ---------------------------------------------------------------------------
# matching and loss
# ---------------------------------------------------------------------------

def hungarian_match(cls_probs: np.ndarray, box_params: np.ndarray,
                    gt_params: np.ndarray, gt_classes: np.ndarray,
                    lambda_cls: float, lambda_box: float
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Optimal assignment of predictions to ground truth.

    Cost per pair: lambda_cls * (-prob of the gt class) plus lambda_box *
    L1 distance of the predicted and gt centers, in range-fraction units.
    Restricting the box cost to centers keeps the assignment stable:
    velocity and size terms would otherwise dominate the distance and
    reshuffle matches while localization is still settling.
    Returns (pred_idx, gt_idx).
    """
    n_gt = gt_params.shape[0]
    if n_gt == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    cost_cls = -cls_probs[:, gt_classes]
    cost_box = np.abs(box_params[:, None, :2] - gt_params[None, :, :2]).sum(axis=2)
    cost = lambda_cls * cost_cls + lambda_box * cost_box
    pred_idx, gt_idx = linear_sum_assignment(cost)
    return pred_idx.astype(np.int64), gt_idx.astype(np.int64)


def _sigmoid_focal(logits: Tensor, targets: np.ndarray, alpha: float = 0.25,
                   gamma: float = 2.0) -> Tensor:
    """Per-element sigmoid focal loss, summed (caller normalizes)."""
    p = logits.sigmoid()
    log_p = log_sigmoid(logits)
    log_1mp = log_sigmoid(-logits)
    pos = (1 - p) ** gamma * log_p * (alpha * targets)
    neg = p ** gamma * log_1mp * ((1 - alpha) * (1 - targets))
    return -(pos + neg).sum()


# Per-component L1 weights: centers are range fractions in [0, 1] while
# velocities reach several m/s, so unweighted L1 spends most of its
# gradient on motion. Upweight centers, damp velocities.
_BOX_WEIGHTS = np.array([2.0, 2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.2, 0.2])


def detection_loss(det: DetSet, gt_params: np.ndarray, gt_classes: np.ndarray,
                   cfg: ModelConfig) -> tuple[Tensor, dict[str, float]]:
    M, K = det.cls_logits.shape
    probs = 1.0 / (1.0 + np.exp(-det.cls_logits.data))
    pred_idx, gt_idx = hungarian_match(probs, det.box_params.data, gt_params,
                                       gt_classes, cfg.lambda_cls, cfg.lambda_box)
    targets = np.zeros((M, K), dtype=np.float64)
    targets[pred_idx, gt_classes[gt_idx]] = 1.0
    norm = max(1.0, float(gt_params.shape[0]))
    cls_loss = _sigmoid_focal(det.cls_logits, targets) * (1.0 / norm)
    if gt_params.shape[0] > 0:
        matched = gather_rows(det.box_params, pred_idx)
        diff = (matched - tensor(gt_params[gt_idx])).abs() * tensor(_BOX_WEIGHTS)
        box_loss = diff.sum() * (1.0 / norm)
    else:
        box_loss = tensor(0.0)
    total = cls_loss * cfg.lambda_cls + box_loss * cfg.lambda_box
    return total, {"cls": cls_loss.item(), "box": box_loss.item()}


def total_loss(output: ModelOutput, gt_boxes: np.ndarray, gt_classes: np.ndarray,
               cfg: ModelConfig) -> tuple[Tensor, dict[str, float]]:
    """Detection loss over every output set plus per-layer heatmap losses."""
    spec = cfg.bev_spec()
    gt_params = boxmod.encode_params(gt_boxes, spec.range)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    terms: list[Tensor] = []
    breakdown: dict[str, float] = {}
    cls_total = box_total = 0.0
    for det in output.det_sets:
        t, parts = detection_loss(det, gt_params, gt_classes, cfg)
        terms.append(t)
        cls_total += parts["cls"]
        box_total += parts["box"]
    breakdown["cls"] = cls_total
    breakdown["box"] = box_total
    hm_total = 0.0
    if cfg.vector_on and cfg.heatmap_loss_on:
        gt_hr = build_gt_heatmap(gt_boxes, spec, "hr")
        gt_lr = build_gt_heatmap(gt_boxes, spec, "lr")
        for hm in output.heatmaps:
            t = heatmap_loss(hm, gt_hr, gt_lr)
            terms.append(t)
            hm_total += t.item()
    breakdown["heatmap"] = hm_total
    loss = terms[0]
    for t in terms[1:]:
        loss = loss + t
    breakdown["total"] = loss.item()
    return loss, breakdown


def decode_detections(det: DetSet, cfg: ModelConfig
                      ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """DetSet -> (boxes [M, BOX_DIM], scores [M], classes [M])."""
    spec = cfg.bev_spec()
    boxes = boxmod.decode_params(det.box_params.data, spec.range)
    probs = 1.0 / (1.0 + np.exp(-det.cls_logits.data))
    classes = probs.argmax(axis=1)
    scores = probs.max(axis=1)
    return boxes, scores, classes
