"""Detection metrics: center-distance AP and translation error.

Predictions are matched to ground truth greedily in confidence order
within a center-distance threshold. Thresholds follow the usual
0.5/1/2/4 m ladder scaled to this BEV range (the reference ladder
assumes a 51.2 m half-extent). When the model produces an objectness
map, each detection's confidence is multiplied by the map value at its
predicted center, which ranks well-localized detections above drifted
near-duplicates; duplicates are then collapsed by greedy center
suppression at a two-HR-cell radius.
"""
from __future__ import annotations

from typing import Any

import numpy as np

from .. import boxes as boxmod
from ..model import Model, ModelConfig, decode_detections
from ..numerics import bilinear_sample, no_grad, tensor
from ..synthdata import Sequence
from .train import frames_of

__all__ = ["evaluate_model", "average_precision", "center_nms",
           "objectness_at", "NOMINAL_THRESHOLDS"]

NOMINAL_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
_REFERENCE_HALF_EXTENT = 51.2
_NMS_CELLS = 2.0


def _threshold_meters(nominal: float, cfg: ModelConfig) -> float:
    return nominal * cfg.bev_extent / _REFERENCE_HALF_EXTENT


def objectness_at(probs: np.ndarray, centers_frac: np.ndarray) -> np.ndarray:
    """Bilinear objectness values at fractional (x, y) BEV positions."""
    h, w = probs.shape
    coords = centers_frac * np.array([w, h], dtype=np.float64)
    return bilinear_sample(tensor(probs[:, :, None]), tensor(coords)).data[:, 0]


def center_nms(centers: np.ndarray, scores: np.ndarray, radius: float
               ) -> np.ndarray:
    """Indices kept by greedy suppression: best score first, then drop
    any detection whose center lies within radius of a kept one."""
    order = np.argsort(-scores, kind="stable")
    kept: list[int] = []
    for i in order:
        c = centers[i]
        near = any(np.hypot(centers[j, 0] - c[0], centers[j, 1] - c[1]) <= radius
                   for j in kept)
        if not near:
            kept.append(int(i))
    return np.array(kept, dtype=np.int64)


def average_precision(preds: list[tuple[float, int, np.ndarray]],
                      gts: dict[int, np.ndarray], radius: float
                      ) -> tuple[float, list[float]]:
    """AP for one class at one match radius.

    preds: (score, scene, center_xy) over all scenes; gts: scene -> [G, 2]
    centers. Greedy match in score order to the nearest unmatched ground
    truth within the radius. Returns (ap, matched center distances).
    """
    n_gt = sum(g.shape[0] for g in gts.values())
    if n_gt == 0:
        return 0.0, []
    order = sorted(range(len(preds)), key=lambda i: -preds[i][0])
    used = {scene: np.zeros(g.shape[0], dtype=bool) for scene, g in gts.items()}
    tp = np.zeros(len(order))
    dists: list[float] = []
    for rank, i in enumerate(order):
        _, scene, center = preds[i]
        g = gts.get(scene)
        if g is None or g.shape[0] == 0:
            continue
        d = np.hypot(g[:, 0] - center[0], g[:, 1] - center[1])
        d[used[scene]] = np.inf
        j = int(np.argmin(d))
        if d[j] <= radius:
            used[scene][j] = True
            tp[rank] = 1.0
            dists.append(float(d[j]))
    tp_cum = np.cumsum(tp)
    recall = tp_cum / n_gt
    precision = tp_cum / np.arange(1, len(order) + 1)
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, precision):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap), dists


def evaluate_model(model: Model, seqs: list[Sequence], cfg: ModelConfig
                   ) -> dict[str, Any]:
    """Forward every sequence and score the final detection set."""
    per_scene: list[tuple[np.ndarray, np.ndarray, np.ndarray,
                          np.ndarray, np.ndarray]] = []
    spec = cfg.bev_spec()
    nms_radius = _NMS_CELLS * (spec.range[1] - spec.range[0]) / cfg.w_hr
    with no_grad():
        for seq in seqs:
            frames, rig, gt_boxes, gt_classes = frames_of(seq)
            out = model.forward(frames, rig)
            det = out.det_sets[cfg.dec_layers - 1]
            boxes, scores, classes = decode_detections(det, cfg)
            if out.heatmaps:
                scores = scores * objectness_at(out.heatmaps[-1].probs.data,
                                                det.box_params.data[:, :2])
            keep = center_nms(boxes[:, [boxmod.X, boxmod.Y]], scores, nms_radius)
            per_scene.append((boxes[keep], scores[keep], classes[keep],
                              gt_boxes, gt_classes))

    result: dict[str, Any] = {"ap": {}}
    per_threshold: dict[float, list[float]] = {t: [] for t in NOMINAL_THRESHOLDS}
    ate: list[float] = []
    for cls in range(cfg.n_classes):
        preds = []
        gts = {}
        for scene, (boxes, scores, classes, gt_boxes, gt_classes) in \
                enumerate(per_scene):
            sel = classes == cls
            for s, b in zip(scores[sel], boxes[sel]):
                preds.append((float(s), scene, b[[boxmod.X, boxmod.Y]]))
            gsel = gt_classes == cls
            gts[scene] = gt_boxes[gsel][:, [boxmod.X, boxmod.Y]]
        if sum(g.shape[0] for g in gts.values()) == 0:
            continue
        for nominal in NOMINAL_THRESHOLDS:
            ap, dists = average_precision(preds, gts,
                                          _threshold_meters(nominal, cfg))
            result["ap"][f"class{cls}@{nominal}"] = ap
            per_threshold[nominal].append(ap)
            if nominal == 2.0:
                ate.extend(dists)
    for nominal, vals in per_threshold.items():
        result[f"map@{nominal}"] = float(np.mean(vals)) if vals else 0.0
    all_vals = [v for vals in per_threshold.values() for v in vals]
    result["map"] = float(np.mean(all_vals)) if all_vals else 0.0
    result["mate"] = float(np.mean(ate)) if ate else float("nan")
    result["n_scenes"] = len(seqs)
    return result
