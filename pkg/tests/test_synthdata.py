"""Synthetic scene generation and the binary dataset container.

Kinematics must be exact (constant velocity, closed form), placement
constraints hold at every frame, and the container round-trips bitwise
with precise error offsets on malformed input.
"""

import struct

import numpy as np
import pytest

from vectorbev import boxes as boxmod
from vectorbev.errors import DatasetError, SceneGenError
from vectorbev.geometry import BevSpec, make_rig, transform_points, inv_se3
from vectorbev.synthdata import (Sequence, boxes_in_ego, generate_scene,
                                 read_dataset, render_camera_features,
                                 write_dataset)


@pytest.fixture
def spec():
    return BevSpec(h_lr=8, w_lr=8, h_hr=16, w_hr=16,
                   range=(-16.0, 16.0, -16.0, 16.0))


@pytest.fixture
def rig():
    return make_rig(n_cams=2, fov_deg=100.0, image_w=16, image_h=16)


class TestSceneGeneration:
    def test_deterministic_per_seed(self, spec, rig):
        a = generate_scene(seed=5, n_boxes=3, spec=spec, rig=rig, c_img=8)
        b = generate_scene(seed=5, n_boxes=3, spec=spec, rig=rig, c_img=8)
        for sa, sb in zip(a.samples, b.samples):
            assert np.array_equal(sa.boxes, sb.boxes)
            assert np.array_equal(sa.cam_feats, sb.cam_feats)
            assert np.array_equal(sa.ego, sb.ego)
        c = generate_scene(seed=6, n_boxes=3, spec=spec, rig=rig, c_img=8)
        assert not np.array_equal(a.samples[0].boxes, c.samples[0].boxes)

    def test_constant_velocity_kinematics_exact(self, spec, rig):
        seq = generate_scene(seed=1, n_boxes=3, spec=spec, rig=rig,
                             T=3, dt=0.5, c_img=4)
        for t in range(1, 3):
            prev = seq.samples[t - 1].boxes
            cur = seq.samples[t].boxes
            want_x = prev[:, boxmod.X] + prev[:, boxmod.VX] * 0.5
            want_y = prev[:, boxmod.Y] + prev[:, boxmod.VY] * 0.5
            assert np.array_equal(cur[:, boxmod.X], want_x)
            assert np.array_equal(cur[:, boxmod.Y], want_y)
            # everything but position is frame-invariant in world frame
            assert np.array_equal(cur[:, 2:], prev[:, 2:])

    def test_boxes_stay_in_ego_range_every_frame(self, spec, rig):
        for seed in range(10):
            seq = generate_scene(seed=seed, n_boxes=4, spec=spec, rig=rig,
                                 T=3, dt=0.5, c_img=4)
            for s in seq.samples:
                local = boxes_in_ego(s)
                margin = np.hypot(local[:, boxmod.L], local[:, boxmod.W]) / 2
                assert (local[:, boxmod.X] >= -16 + margin).all()
                assert (local[:, boxmod.X] <= 16 - margin).all()
                assert (local[:, boxmod.Y] >= -16 + margin).all()
                assert (local[:, boxmod.Y] <= 16 - margin).all()

    def test_bounding_circles_never_touch(self, spec, rig):
        for seed in range(10):
            seq = generate_scene(seed=seed, n_boxes=4, spec=spec, rig=rig,
                                 T=3, dt=0.5, c_img=4)
            for s in seq.samples:
                b = s.boxes
                r = np.hypot(b[:, boxmod.L], b[:, boxmod.W]) / 2
                for i in range(4):
                    for j in range(i + 1, 4):
                        d = np.hypot(b[i, boxmod.X] - b[j, boxmod.X],
                                     b[i, boxmod.Y] - b[j, boxmod.Y])
                        assert d > r[i] + r[j]

    def test_impossible_packing_raises(self, rig):
        cramped = BevSpec(h_lr=4, w_lr=4, h_hr=8, w_hr=8,
                          range=(-1.0, 1.0, -1.0, 1.0))
        with pytest.raises(SceneGenError):
            generate_scene(seed=0, n_boxes=30, spec=cramped, rig=rig, c_img=4)

    def test_ego_transform_round_trip(self, spec, rig):
        seq = generate_scene(seed=3, n_boxes=3, spec=spec, rig=rig, c_img=4)
        s = seq.samples[1]
        local = boxes_in_ego(s)
        centers = np.stack([local[:, boxmod.X], local[:, boxmod.Y],
                            local[:, boxmod.Z]], axis=1)
        back = transform_points(s.ego, centers)
        assert np.allclose(back[:, 0], s.boxes[:, boxmod.X], atol=1e-12)
        assert np.allclose(back[:, 1], s.boxes[:, boxmod.Y], atol=1e-12)


class TestRendering:
    def test_rendering_is_seeded(self, spec, rig):
        seq = generate_scene(seed=7, n_boxes=2, spec=spec, rig=rig, c_img=8)
        s = seq.samples[0]
        a = render_camera_features(s, rig, 8, seed=7)
        b = render_camera_features(s, rig, 8, seed=7)
        assert np.array_equal(a, b)
        c = render_camera_features(s, rig, 8, seed=8)
        assert not np.array_equal(a, c)

    def test_occlusion_independent_of_box_order(self, spec, rig):
        seq = generate_scene(seed=9, n_boxes=3, spec=spec, rig=rig, c_img=8)
        s = seq.samples[0]
        flipped = type(s)(index=s.index, ego=s.ego,
                          boxes=s.boxes[::-1].copy(),
                          classes=s.classes[::-1].copy(),
                          cam_feats=s.cam_feats)
        a = render_camera_features(s, rig, 8, seed=9)
        b = render_camera_features(flipped, rig, 8, seed=9)
        assert np.array_equal(a, b)

    def test_boxes_leave_a_mark(self, spec, rig):
        seq = generate_scene(seed=11, n_boxes=3, spec=spec, rig=rig, c_img=8)
        feats = seq.samples[0].cam_feats
        # noise floor is std 0.01; box splats are unit-norm patterns
        assert float(np.abs(feats).max()) > 0.2

    def test_feature_dtype_and_shape(self, spec, rig):
        seq = generate_scene(seed=12, n_boxes=2, spec=spec, rig=rig, c_img=8)
        f = seq.samples[0].cam_feats
        assert f.dtype == np.float32
        assert f.shape == (2, 16, 16, 8)


class TestDatasetContainer:
    def write_one(self, tmp_path, spec, rig, seed=4):
        seq = generate_scene(seed=seed, n_boxes=3, spec=spec, rig=rig, c_img=8)
        path = str(tmp_path / "scene.vbev")
        write_dataset(seq, path)
        return seq, path

    def test_round_trip_bitwise(self, tmp_path, spec, rig):
        seq, path = self.write_one(tmp_path, spec, rig)
        back = read_dataset(path)
        assert isinstance(back, Sequence)
        assert back.seed == seq.seed
        assert len(back.samples) == len(seq.samples)
        for sa, sb in zip(seq.samples, back.samples):
            assert np.array_equal(sa.ego, sb.ego)
            assert np.array_equal(sa.boxes, sb.boxes)
            assert np.array_equal(sa.classes, sb.classes)
            assert np.array_equal(sa.cam_feats, sb.cam_feats)
            assert sa.cam_feats.dtype == sb.cam_feats.dtype
        for ca, cb in zip(seq.rig.cameras, back.rig.cameras):
            assert np.array_equal(ca.intrinsics, cb.intrinsics)
            assert np.array_equal(ca.extrinsics, cb.extrinsics)

    def test_rewrite_is_byte_identical(self, tmp_path, spec, rig):
        seq, path = self.write_one(tmp_path, spec, rig)
        back = read_dataset(path)
        path2 = str(tmp_path / "again.vbev")
        write_dataset(back, path2)
        assert open(path, "rb").read() == open(path2, "rb").read()

    def test_bad_magic_offset_zero(self, tmp_path, spec, rig):
        _, path = self.write_one(tmp_path, spec, rig)
        blob = bytearray(open(path, "rb").read())
        blob[0] ^= 0xFF
        open(path, "wb").write(bytes(blob))
        with pytest.raises(DatasetError) as e:
            read_dataset(path)
        assert e.value.offset == 0

    def test_bad_version_offset_eight(self, tmp_path, spec, rig):
        _, path = self.write_one(tmp_path, spec, rig)
        blob = bytearray(open(path, "rb").read())
        blob[8:12] = struct.pack("<I", 99)
        open(path, "wb").write(bytes(blob))
        with pytest.raises(DatasetError) as e:
            read_dataset(path)
        assert e.value.offset == 8

    def test_truncation_reports_cut_offset(self, tmp_path, spec, rig):
        _, path = self.write_one(tmp_path, spec, rig)
        blob = open(path, "rb").read()
        cut = len(blob) - 100
        open(path, "wb").write(blob[:cut])
        with pytest.raises(DatasetError) as e:
            read_dataset(path)
        assert 0 < e.value.offset <= cut

    def test_trailing_bytes_rejected_at_end(self, tmp_path, spec, rig):
        _, path = self.write_one(tmp_path, spec, rig)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob + b"JUNK")
        with pytest.raises(DatasetError) as e:
            read_dataset(path)
        assert e.value.offset == len(blob)

    def test_empty_boxes_survive_round_trip(self, tmp_path, spec, rig):
        seq = generate_scene(seed=0, n_boxes=0, spec=spec, rig=rig, c_img=8)
        path = str(tmp_path / "empty.vbev")
        write_dataset(seq, path)
        back = read_dataset(path)
        assert back.samples[0].boxes.shape == (0, boxmod.BOX_DIM)
        assert back.samples[0].classes.shape == (0,)
