"""BEV grid coordinate maps, pillar reference points, and pinhole projection.

Conventions: right-handed world frame with Z up, ego at the origin of the
BEV range. Continuous cell coordinates live in ``[0, w] x [0, h]`` with
cell ``(row i, col j)`` centered at ``(j+0.5, i+0.5)``; coordinate ``(0, 0)``
is the ``(x_min, y_min)`` corner. Image coordinates use the same half-pixel
convention, so the principal point at ``W/2`` lands between pixel centers.

Everything here is plain numpy over float64 inputs; gradients never flow
through geometry (reference points are treated as constants by the model).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError

__all__ = [
    "BevSpec",
    "Camera",
    "CameraRig",
    "hr_cell_to_world",
    "world_to_hr_cell",
    "lr_cell_to_world",
    "world_to_lr_cell",
    "hr_to_lr_coords",
    "make_pillar_points",
    "project_to_cameras",
    "make_rig",
    "se3",
    "inv_se3",
    "transform_points",
    "yaw_rot2d",
    "validate_rigid",
]


@dataclass(frozen=True)
class BevSpec:
    """Grid extents (cells), metric range, and pillar heights."""
    h_lr: int
    w_lr: int
    h_hr: int
    w_hr: int
    range: tuple[float, float, float, float] = (-16.0, 16.0, -16.0, 16.0)
    z_levels: tuple[float, ...] = field(default_factory=lambda: tuple(np.linspace(-1.0, 3.0, 4)))

    def __post_init__(self):
        x_min, x_max, y_min, y_max = self.range
        if self.h_hr < self.h_lr or self.w_hr < self.w_lr:
            raise ContractError("HR grid must be at least as fine as LR")
        if min(self.h_lr, self.w_lr) < 1:
            raise ContractError("grid extents must be positive")
        if x_max <= x_min or y_max <= y_min:
            raise ContractError("metric range extents must be positive")
        z = np.asarray(self.z_levels, dtype=np.float64)
        if z.size == 0 or np.any(np.diff(z) <= 0):
            raise ContractError("z_levels must be non-empty and strictly increasing")


def _cell_to_world(c, w: int, h: int, rng: tuple[float, float, float, float]) -> np.ndarray:
    x_min, x_max, y_min, y_max = rng
    c = np.asarray(c, dtype=np.float64)
    out = np.empty_like(c)
    out[..., 0] = x_min + c[..., 0] * (x_max - x_min) / w
    out[..., 1] = y_min + c[..., 1] * (y_max - y_min) / h
    return out


def _world_to_cell(xy, w: int, h: int, rng: tuple[float, float, float, float]) -> np.ndarray:
    x_min, x_max, y_min, y_max = rng
    xy = np.asarray(xy, dtype=np.float64)
    out = np.empty_like(xy)
    out[..., 0] = (xy[..., 0] - x_min) * w / (x_max - x_min)
    out[..., 1] = (xy[..., 1] - y_min) * h / (y_max - y_min)
    return out


def hr_cell_to_world(spec: BevSpec, c) -> np.ndarray:
    return _cell_to_world(c, spec.w_hr, spec.h_hr, spec.range)


def world_to_hr_cell(spec: BevSpec, xy) -> np.ndarray:
    return _world_to_cell(xy, spec.w_hr, spec.h_hr, spec.range)


def lr_cell_to_world(spec: BevSpec, c) -> np.ndarray:
    return _cell_to_world(c, spec.w_lr, spec.h_lr, spec.range)


def world_to_lr_cell(spec: BevSpec, xy) -> np.ndarray:
    return _world_to_cell(xy, spec.w_lr, spec.h_lr, spec.range)


def hr_to_lr_coords(spec: BevSpec, c_hr) -> np.ndarray:
    """Rescale HR cell coordinates onto the LR grid at the same metric spot."""
    c_hr = np.asarray(c_hr, dtype=np.float64)
    out = np.empty_like(c_hr)
    out[..., 0] = c_hr[..., 0] * (spec.w_lr / spec.w_hr)
    out[..., 1] = c_hr[..., 1] * (spec.h_lr / spec.h_hr)
    return out


def make_pillar_points(spec: BevSpec, c, grid: str = "hr") -> np.ndarray:
    """Lift cell coordinates to 3D pillar points, one per z level.

    Returns [N, len(z_levels), 3] ordered by increasing Z.
    """
    if grid == "hr":
        xy = hr_cell_to_world(spec, c)
    elif grid == "lr":
        xy = lr_cell_to_world(spec, c)
    else:
        raise ContractError(f"grid must be 'hr' or 'lr', got {grid!r}")
    xy = np.atleast_2d(xy)
    z = np.asarray(spec.z_levels, dtype=np.float64)
    pts = np.empty((xy.shape[0], z.size, 3), dtype=np.float64)
    pts[:, :, 0] = xy[:, None, 0]
    pts[:, :, 1] = xy[:, None, 1]
    pts[:, :, 2] = z[None, :]
    return pts


# ---------------------------------------------------------------------------
# rigid transforms
# ---------------------------------------------------------------------------

def yaw_rot2d(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s], [s, c]], dtype=np.float64)


def se3(R: np.ndarray, t) -> np.ndarray:
    T = np.eye(4, dtype=np.float64)
    T[:3, :3] = R
    T[:3, 3] = t
    return T


def inv_se3(T: np.ndarray) -> np.ndarray:
    R = T[:3, :3]
    out = np.eye(4, dtype=np.float64)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ T[:3, 3]
    return out


def transform_points(T: np.ndarray, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ T[:3, :3].T + T[:3, 3]


def validate_rigid(T: np.ndarray, tol: float = 1e-9) -> None:
    T = np.asarray(T)
    if T.shape != (4, 4):
        raise ContractError(f"rigid transform must be 4x4, got {T.shape}")
    R = T[:3, :3]
    if np.abs(R @ R.T - np.eye(3)).max() > tol:
        raise ContractError("rotation block is not orthonormal")
    if np.abs(T[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > tol:
        raise ContractError("bottom row of rigid transform must be [0 0 0 1]")


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Camera:
    """Pinhole camera: +Z forward, +X right, +Y down in the camera frame."""
    intrinsics: np.ndarray
    extrinsics: np.ndarray  # world-to-camera
    image_h: int
    image_w: int

    def __post_init__(self):
        K = np.asarray(self.intrinsics)
        if K.shape != (3, 3):
            raise ContractError(f"intrinsics must be 3x3, got {K.shape}")
        if np.abs(K[np.tril_indices(3, -1)]).max() > 0:
            raise ContractError("intrinsics must be upper-triangular")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ContractError("focal lengths must be positive")
        validate_rigid(self.extrinsics)

    def project(self, points) -> tuple[np.ndarray, np.ndarray]:
        """World points [N, 3] -> (uv [N, 2], visible [N])."""
        cam = transform_points(self.extrinsics, points)
        z = cam[:, 2]
        safe = np.where(z > 0, z, 1.0)
        uvw = cam @ np.asarray(self.intrinsics, dtype=np.float64).T
        uv = uvw[:, :2] / safe[:, None]
        visible = (z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < self.image_w) \
            & (uv[:, 1] >= 0) & (uv[:, 1] < self.image_h)
        return uv, visible


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[Camera, ...]

    def __post_init__(self):
        if not self.cameras:
            raise ContractError("rig needs at least one camera")


def project_to_cameras(rig: CameraRig, points) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-camera (uv, visible) for a batch of world points."""
    pts = np.asarray(points, dtype=np.float64)
    return [cam.project(pts) for cam in rig.cameras]


def make_rig(
    n_cams: int = 4,
    fov_deg: float = 100.0,
    image_w: int = 64,
    image_h: int = 64,
    cam_height: float = 1.5,
) -> CameraRig:
    """Ring of outward-facing horizontal cameras, evenly spaced in yaw."""
    fx = (image_w / 2.0) / np.tan(np.deg2rad(fov_deg) / 2.0)
    K = np.array([[fx, 0.0, image_w / 2.0],
                  [0.0, fx, image_h / 2.0],
                  [0.0, 0.0, 1.0]])
    cams = []
    for i in range(n_cams):
        yaw = 2.0 * np.pi * i / n_cams
        fwd = np.array([np.cos(yaw), np.sin(yaw), 0.0])
        right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
        down = np.array([0.0, 0.0, -1.0])
        R_wc = np.stack([right, down, fwd])  # rows: camera axes in world
        t = -R_wc @ np.array([0.0, 0.0, cam_height])
        cams.append(Camera(intrinsics=K, extrinsics=se3(R_wc, t),
                           image_h=image_h, image_w=image_w))
    return CameraRig(cameras=tuple(cams))
