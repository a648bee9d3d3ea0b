"""Deterministic synthetic multi-camera sequences.

A scene is a handful of moving boxes seen from a camera ring on a moving
ego. Camera "features" stand in for a backbone: each box splats a
class-keyed channel pattern with Gaussian falloff at projected surface
points, depth-buffered per pixel, over a seeded noise floor.

Boxes are stored in the world frame with exact linear kinematics; ego
poses map ego to world per timestamp.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from . import boxes as boxmod
from .errors import DatasetError, SceneGenError
from .geometry import BevSpec, Camera, CameraRig, inv_se3, se3, transform_points, \
    yaw_rot2d

__all__ = [
    "SceneSample",
    "Sequence",
    "generate_scene",
    "render_camera_features",
    "boxes_in_ego",
    "write_dataset",
    "read_dataset",
]

# class id -> (length range, width range, height range) in meters
_CLASS_DIMS = (
    ((3.5, 5.0), (1.6, 2.1), (1.4, 1.8)),
    ((6.0, 9.0), (2.2, 2.8), (2.5, 3.5)),
    ((0.5, 0.8), (0.5, 0.8), (1.6, 1.9)),
)


@dataclass
class SceneSample:
    index: int
    ego: np.ndarray        # 4x4 ego-to-world, float64
    boxes: np.ndarray      # [N, BOX_DIM] world frame, float64
    classes: np.ndarray    # [N] int64
    cam_feats: np.ndarray  # [n_cams, Hc, Wc, C_img] float32


@dataclass
class Sequence:
    samples: list[SceneSample]
    rig: CameraRig
    seed: int


def _rot_z(yaw: float) -> np.ndarray:
    R = np.eye(3)
    R[:2, :2] = yaw_rot2d(yaw)
    return R


def boxes_in_ego(sample: SceneSample) -> np.ndarray:
    """World-frame boxes expressed in the sample's ego frame."""
    T = inv_se3(sample.ego)
    ego_yaw = np.arctan2(sample.ego[1, 0], sample.ego[0, 0])
    out = sample.boxes.copy()
    if out.shape[0] == 0:
        return out
    centers = np.concatenate([out[:, [boxmod.X, boxmod.Y]],
                              out[:, [boxmod.Z]]], axis=1)
    local = transform_points(T, centers)
    out[:, boxmod.X] = local[:, 0]
    out[:, boxmod.Y] = local[:, 1]
    out[:, boxmod.Z] = local[:, 2]
    out[:, boxmod.YAW] = out[:, boxmod.YAW] - ego_yaw
    vel = out[:, [boxmod.VX, boxmod.VY]] @ yaw_rot2d(-ego_yaw).T
    out[:, boxmod.VX] = vel[:, 0]
    out[:, boxmod.VY] = vel[:, 1]
    return out


def _surface_points(box: np.ndarray) -> np.ndarray:
    """Corners, face centers, and roof center of a box, world frame [15, 3]."""
    l, w, h = box[boxmod.L], box[boxmod.W], box[boxmod.H]
    sx, sy, sz = l / 2, w / 2, h / 2
    corners = np.array([[dx, dy, dz] for dx in (-sx, sx) for dy in (-sy, sy)
                        for dz in (-sz, sz)])
    faces = np.array([[sx, 0, 0], [-sx, 0, 0], [0, sy, 0], [0, -sy, 0],
                      [0, 0, sz], [0, 0, -sz]])
    pts = np.concatenate([corners, faces, np.zeros((1, 3))])
    R = _rot_z(box[boxmod.YAW])
    center = box[[boxmod.X, boxmod.Y, boxmod.Z]]
    return pts @ R.T + center


def _class_pattern(cls: int, c_img: int) -> np.ndarray:
    v = np.random.default_rng(1000 + int(cls)).normal(size=c_img)
    return (v / np.linalg.norm(v)).astype(np.float32)


def render_camera_features(sample: SceneSample, rig: CameraRig, c_img: int,
                           seed: int) -> np.ndarray:
    """Per-camera feature maps [n_cams, H, W, c_img] float32.

    Box surface points splat class patterns scaled by a Gaussian pixel
    falloff; a per-pixel depth buffer keeps only the nearest box, so
    occlusion is exact regardless of draw order.
    """
    T_world_to_ego = inv_se3(sample.ego)
    n_cams = len(rig.cameras)
    H, W = rig.cameras[0].image_h, rig.cameras[0].image_w
    out = np.empty((n_cams, H, W, c_img), dtype=np.float32)
    sigma = 1.2
    reach = 3
    for ci, cam in enumerate(rig.cameras):
        noise_rng = np.random.default_rng([seed, 7919, sample.index, ci])
        feat = noise_rng.normal(0.0, 0.01, size=(H, W, c_img)).astype(np.float32)
        zbuf = np.full((H, W), np.inf)
        for b in range(sample.boxes.shape[0]):
            box = sample.boxes[b]
            pattern = _class_pattern(int(sample.classes[b]), c_img)
            pts_ego = transform_points(T_world_to_ego, _surface_points(box))
            uv, vis = cam.project(pts_ego)
            depth = transform_points(cam.extrinsics, pts_ego)[:, 2]
            for p in np.nonzero(vis)[0]:
                px, py = uv[p]
                x0 = max(0, int(np.floor(px)) - reach)
                x1 = min(W, int(np.floor(px)) + reach + 1)
                y0 = max(0, int(np.floor(py)) - reach)
                y1 = min(H, int(np.floor(py)) + reach + 1)
                if x0 >= x1 or y0 >= y1:
                    continue
                ys, xs = np.mgrid[y0:y1, x0:x1]
                fall = np.exp(-((xs + 0.5 - px) ** 2 + (ys + 0.5 - py) ** 2)
                              / (2 * sigma * sigma)).astype(np.float32)
                closer = depth[p] < zbuf[y0:y1, x0:x1]
                write = closer & (fall > 0.05)
                feat[y0:y1, x0:x1][write] = fall[write, None] * pattern[None, :]
                zbuf[y0:y1, x0:x1][write] = depth[p]
        out[ci] = feat
    return out


def generate_scene(seed: int, n_boxes: int, spec: BevSpec, rig: CameraRig,
                   T: int = 2, dt: float = 0.5, c_img: int = 32,
                   n_classes: int = 3) -> Sequence:
    """Seeded sequence of T frames with non-overlapping moving boxes.

    Placement is rejection-sampled so that, at every frame, each box stays
    inside the ego-relative BEV range and the conservative bounding
    circles of all box pairs stay disjoint.
    """
    if n_boxes < 0:
        raise SceneGenError("n_boxes must be non-negative")
    n_classes = min(n_classes, len(_CLASS_DIMS))
    rng = np.random.default_rng([seed, 104729])
    x_min, x_max, y_min, y_max = spec.range

    ego_dir = rng.uniform(0, 2 * np.pi)
    ego_speed = rng.uniform(0, 3.0)
    ego_vel = np.array([np.cos(ego_dir), np.sin(ego_dir)]) * ego_speed
    yaw_rate = rng.uniform(-0.2, 0.2)
    egos = [se3(_rot_z(yaw_rate * t * dt),
                [ego_vel[0] * t * dt, ego_vel[1] * t * dt, 0.0])
            for t in range(T)]

    boxes = np.zeros((n_boxes, boxmod.BOX_DIM))
    classes = np.zeros(n_boxes, dtype=np.int64)
    radii = np.zeros(n_boxes)
    placed = 0
    for i in range(n_boxes):
        ok = False
        for _ in range(1000):
            cls = int(rng.integers(0, n_classes))
            (lr, wr, hr) = _CLASS_DIMS[cls]
            l = rng.uniform(*lr)
            w = rng.uniform(*wr)
            h = rng.uniform(*hr)
            yaw = rng.uniform(-np.pi, np.pi)
            speed = rng.uniform(0, 5.0)
            vel = np.array([np.cos(yaw), np.sin(yaw)]) * speed
            radius = np.hypot(l, w) / 2
            margin = radius + 0.2
            if x_min + margin >= x_max - margin or y_min + margin >= y_max - margin:
                continue  # box cannot fit this range at all; try another draw
            cx = rng.uniform(x_min + margin, x_max - margin)
            cy = rng.uniform(y_min + margin, y_max - margin)
            good = True
            for t in range(T):
                pos_w = np.array([cx, cy]) + vel * t * dt
                local = transform_points(inv_se3(egos[t]),
                                         np.array([[pos_w[0], pos_w[1], 0.0]]))[0]
                if not (x_min + margin <= local[0] <= x_max - margin
                        and y_min + margin <= local[1] <= y_max - margin):
                    good = False
                    break
                for j in range(placed):
                    other = boxes[j, [boxmod.X, boxmod.Y]] \
                        + boxes[j, [boxmod.VX, boxmod.VY]] * t * dt
                    if np.hypot(*(pos_w - other)) <= radius + radii[j]:
                        good = False
                        break
                if not good:
                    break
            if good:
                boxes[i, boxmod.X] = cx
                boxes[i, boxmod.Y] = cy
                boxes[i, boxmod.Z] = h / 2
                boxes[i, boxmod.L] = l
                boxes[i, boxmod.W] = w
                boxes[i, boxmod.H] = h
                boxes[i, boxmod.YAW] = yaw
                boxes[i, boxmod.VX] = vel[0]
                boxes[i, boxmod.VY] = vel[1]
                classes[i] = cls
                radii[i] = radius
                placed += 1
                ok = True
                break
        if not ok:
            raise SceneGenError(
                f"could not place box {i} of {n_boxes} after 1000 attempts")

    samples = []
    cur = boxes.copy()
    for t in range(T):
        if t > 0:
            # step positions so frame-to-frame deltas are bitwise v * dt
            cur[:, boxmod.X] += cur[:, boxmod.VX] * dt
            cur[:, boxmod.Y] += cur[:, boxmod.VY] * dt
        bt = cur.copy()
        sample = SceneSample(index=t, ego=egos[t], boxes=bt, classes=classes.copy(),
                             cam_feats=np.empty(0, dtype=np.float32))
        sample.cam_feats = render_camera_features(sample, rig, c_img, seed)
        samples.append(sample)
    return Sequence(samples=samples, rig=rig, seed=seed)


# ---------------------------------------------------------------------------
# dataset container
# ---------------------------------------------------------------------------

_MAGIC = b"VBEVDS1\x00"
_VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8"}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1,
                np.dtype(np.int64): 2}


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    code = _DTYPE_CODES[arr.dtype]
    nb = name.encode("utf-8")
    head = struct.pack("<HBB", len(nb), code, arr.ndim)
    shape = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    payload = np.ascontiguousarray(arr).astype(_DTYPES[code]).tobytes()
    return head + nb + shape + payload


def _records_of(seq: Sequence) -> list[tuple[str, np.ndarray]]:
    recs: list[tuple[str, np.ndarray]] = [
        ("seed", np.array(seq.seed, dtype=np.int64)),
        ("n_samples", np.array(len(seq.samples), dtype=np.int64)),
        ("rig.intrinsics", np.stack([c.intrinsics for c in seq.rig.cameras])),
        ("rig.extrinsics", np.stack([c.extrinsics for c in seq.rig.cameras])),
        ("rig.image_hw", np.array([seq.rig.cameras[0].image_h,
                                   seq.rig.cameras[0].image_w], dtype=np.int64)),
    ]
    for s in seq.samples:
        recs.append((f"s{s.index}.ego", s.ego))
        recs.append((f"s{s.index}.boxes", s.boxes))
        recs.append((f"s{s.index}.classes", s.classes))
        recs.append((f"s{s.index}.cam_feats", s.cam_feats))
    return recs


def write_dataset(seq: Sequence, path: str) -> None:
    recs = _records_of(seq)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(recs)))
        for name, arr in recs:
            f.write(_pack_record(name, arr))


def read_dataset(path: str) -> Sequence:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != _MAGIC:
        raise DatasetError("bad magic bytes", offset=0)
    if len(blob) < 16:
        raise DatasetError("truncated header", offset=len(blob))
    version, count = struct.unpack_from("<II", blob, 8)
    if version != _VERSION:
        raise DatasetError(f"unsupported version {version}", offset=8)
    off = 16
    recs: dict[str, np.ndarray] = {}
    for _ in range(count):
        if off + 4 > len(blob):
            raise DatasetError("truncated record header", offset=off)
        name_len, code, ndim = struct.unpack_from("<HBB", blob, off)
        off += 4
        if code not in _DTYPES:
            raise DatasetError(f"unknown dtype code {code}", offset=off - 2)
        if off + name_len + 8 * ndim > len(blob):
            raise DatasetError("truncated record metadata", offset=off)
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        shape = struct.unpack_from(f"<{ndim}Q", blob, off) if ndim else ()
        off += 8 * ndim
        dtype = np.dtype(_DTYPES[code])
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        nbytes = count * dtype.itemsize
        if off + nbytes > len(blob):
            raise DatasetError(f"truncated payload for {name!r}", offset=off)
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
        recs[name] = arr.astype(dtype.newbyteorder("=")).reshape(shape)
        off += nbytes
    if off != len(blob):
        raise DatasetError("trailing bytes after final record", offset=off)

    try:
        n = int(recs["n_samples"])
        hw = recs["rig.image_hw"]
        cams = tuple(
            Camera(intrinsics=recs["rig.intrinsics"][i].copy(),
                   extrinsics=recs["rig.extrinsics"][i].copy(),
                   image_h=int(hw[0]), image_w=int(hw[1]))
            for i in range(recs["rig.intrinsics"].shape[0]))
        samples = [
            SceneSample(index=t, ego=recs[f"s{t}.ego"].copy(),
                        boxes=recs[f"s{t}.boxes"].copy().reshape(-1, boxmod.BOX_DIM),
                        classes=recs[f"s{t}.classes"].copy().astype(np.int64),
                        cam_feats=recs[f"s{t}.cam_feats"].copy())
            for t in range(n)
        ]
    except KeyError as e:
        raise DatasetError(f"missing record {e.args[0]!r}", offset=off) from e
    return Sequence(samples=samples, rig=CameraRig(cameras=cams),
                    seed=int(recs["seed"]))
