"""Box array conventions shared by targets, rendering, detection, and eval.

A box is one float64 row: center (X, Y, Z) in meters, footprint length L
(along heading) and width W, height H, yaw about +Z, and planar velocity
(VX, VY) in m/s. Class ids travel in a separate integer array.
"""
from __future__ import annotations

import numpy as np

from .geometry import yaw_rot2d

X, Y, Z, L, W, H, YAW, VX, VY = range(9)
BOX_DIM = 9

__all__ = ["X", "Y", "Z", "L", "W", "H", "YAW", "VX", "VY", "BOX_DIM",
           "bev_corners", "encode_params", "decode_params", "PARAM_DIM"]

# Regression parameterization: (cx_raw, cy_raw) sigmoid into the BEV range,
# z in meters, dims in log space, yaw as (sin, cos), velocity raw.
PARAM_DIM = 10


def bev_corners(box: np.ndarray) -> np.ndarray:
    """Four BEV footprint corners, counterclockwise, [4, 2] meters."""
    half = np.array([[box[L] / 2, box[W] / 2],
                     [-box[L] / 2, box[W] / 2],
                     [-box[L] / 2, -box[W] / 2],
                     [box[L] / 2, -box[W] / 2]])
    return half @ yaw_rot2d(box[YAW]).T + box[[X, Y]]


def encode_params(boxes: np.ndarray, bev_range: tuple[float, float, float, float]) -> np.ndarray:
    """Ground-truth boxes -> regression targets [N, PARAM_DIM].

    Centers are expressed as fractions of the BEV range (the sigmoid-space
    target); callers compare against sigmoid(raw) predictions.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, BOX_DIM)
    x_min, x_max, y_min, y_max = bev_range
    out = np.empty((boxes.shape[0], PARAM_DIM), dtype=np.float64)
    out[:, 0] = (boxes[:, X] - x_min) / (x_max - x_min)
    out[:, 1] = (boxes[:, Y] - y_min) / (y_max - y_min)
    out[:, 2] = boxes[:, Z]
    out[:, 3] = np.log(boxes[:, L])
    out[:, 4] = np.log(boxes[:, W])
    out[:, 5] = np.log(boxes[:, H])
    out[:, 6] = np.sin(boxes[:, YAW])
    out[:, 7] = np.cos(boxes[:, YAW])
    out[:, 8] = boxes[:, VX]
    out[:, 9] = boxes[:, VY]
    return out


def decode_params(params: np.ndarray, bev_range: tuple[float, float, float, float]) -> np.ndarray:
    """Predicted parameters (centers already in [0,1]) -> box rows [N, BOX_DIM]."""
    params = np.asarray(params, dtype=np.float64).reshape(-1, PARAM_DIM)
    x_min, x_max, y_min, y_max = bev_range
    out = np.empty((params.shape[0], BOX_DIM), dtype=np.float64)
    out[:, X] = params[:, 0] * (x_max - x_min) + x_min
    out[:, Y] = params[:, 1] * (y_max - y_min) + y_min
    out[:, Z] = params[:, 2]
    out[:, L] = np.exp(params[:, 3])
    out[:, W] = np.exp(params[:, 4])
    out[:, H] = np.exp(params[:, 5])
    out[:, YAW] = np.arctan2(params[:, 6], params[:, 7])
    out[:, VX] = params[:, 8]
    out[:, VY] = params[:, 9]
    return out
