"""Grid coordinate conventions, rigid transforms, and camera projection.

Coordinate conventions are pinned here: cell coordinate c maps to the
world position of the cell's left/top edge at c=0, and c + 0.5 is the
cell center. Round trips must be exact to float64 resolution.
"""

import numpy as np
import pytest

from vectorbev.errors import ContractError
from vectorbev.geometry import (BevSpec, Camera, CameraRig, hr_cell_to_world,
                                hr_to_lr_coords, inv_se3, lr_cell_to_world,
                                make_pillar_points, make_rig,
                                project_to_cameras, se3, transform_points,
                                validate_rigid, world_to_hr_cell,
                                world_to_lr_cell, yaw_rot2d)


@pytest.fixture
def spec():
    return BevSpec(h_lr=10, w_lr=10, h_hr=40, w_hr=40,
                   range=(-16.0, 16.0, -16.0, 16.0))


class TestBevSpecContracts:
    def test_hr_must_be_at_least_lr(self):
        with pytest.raises(ContractError):
            BevSpec(h_lr=20, w_lr=20, h_hr=10, w_hr=40)

    def test_range_must_be_positive_extent(self):
        with pytest.raises(ContractError):
            BevSpec(h_lr=4, w_lr=4, h_hr=8, w_hr=8, range=(2.0, -2.0, -2.0, 2.0))

    def test_z_levels_must_increase(self):
        with pytest.raises(ContractError):
            BevSpec(h_lr=4, w_lr=4, h_hr=8, w_hr=8, z_levels=(1.0, 0.0))


class TestGridMapping:
    def test_corner_and_center(self, spec):
        # Cell (0, 0) edge is the range minimum; grid midpoint is origin.
        assert np.allclose(hr_cell_to_world(spec, [0.0, 0.0]), [-16.0, -16.0])
        assert np.allclose(hr_cell_to_world(spec, [20.0, 20.0]), [0.0, 0.0])
        assert np.allclose(hr_cell_to_world(spec, [40.0, 40.0]), [16.0, 16.0])
        # HR cell width is 32/40 = 0.8 m.
        assert np.allclose(hr_cell_to_world(spec, [1.0, 0.0]),
                           [-16.0 + 0.8, -16.0])

    def test_round_trip_exact(self, spec):
        rng = np.random.default_rng(3)
        for trial in range(20):
            c = rng.uniform(0.0, 40.0, size=(8, 2))
            back = world_to_hr_cell(spec, hr_cell_to_world(spec, c))
            assert np.allclose(back, c, atol=1e-12)
            cl = rng.uniform(0.0, 10.0, size=(8, 2))
            backl = world_to_lr_cell(spec, lr_cell_to_world(spec, cl))
            assert np.allclose(backl, cl, atol=1e-12)

    def test_hr_to_lr_preserves_world_position(self, spec):
        rng = np.random.default_rng(4)
        c_hr = rng.uniform(0.0, 40.0, size=(16, 2))
        c_lr = hr_to_lr_coords(spec, c_hr)
        assert np.allclose(lr_cell_to_world(spec, c_lr),
                           hr_cell_to_world(spec, c_hr), atol=1e-12)

    def test_anisotropic_grid(self):
        s = BevSpec(h_lr=5, w_lr=10, h_hr=20, w_hr=30,
                    range=(-8.0, 8.0, -4.0, 4.0))
        assert np.allclose(hr_cell_to_world(s, [30.0, 20.0]), [8.0, 4.0])
        assert np.allclose(hr_to_lr_coords(s, [30.0, 20.0]), [10.0, 5.0])


class TestPillars:
    def test_shape_and_z_order(self, spec):
        pts = make_pillar_points(spec, [[5.0, 7.0], [1.0, 2.0]], grid="hr")
        assert pts.shape == (2, 4, 3)
        assert np.all(np.diff(pts[:, :, 2], axis=1) > 0)
        assert np.allclose(pts[0, :, :2], hr_cell_to_world(spec, [5.0, 7.0]))
        assert np.allclose(pts[:, 0, 2], spec.z_levels[0])
        assert np.allclose(pts[:, -1, 2], spec.z_levels[-1])

    def test_lr_grid_selector(self, spec):
        pts = make_pillar_points(spec, [[2.0, 3.0]], grid="lr")
        assert np.allclose(pts[0, 0, :2], lr_cell_to_world(spec, [2.0, 3.0]))

    def test_bad_grid_rejected(self, spec):
        with pytest.raises(ContractError):
            make_pillar_points(spec, [[0.0, 0.0]], grid="mid")


class TestRigidTransforms:
    def test_yaw_rotation_basics(self):
        R = yaw_rot2d(np.pi / 2)
        assert np.allclose(R @ np.array([1.0, 0.0]), [0.0, 1.0], atol=1e-15)

    def test_inverse_composes_to_identity(self):
        rng = np.random.default_rng(5)
        for trial in range(20):
            yaw = rng.uniform(-np.pi, np.pi)
            R3 = np.eye(3)
            R3[:2, :2] = yaw_rot2d(yaw)
            T = se3(R3, rng.normal(size=3))
            assert np.allclose(T @ inv_se3(T), np.eye(4), atol=1e-12)
            validate_rigid(T)

    def test_transform_points_matches_homogeneous(self):
        rng = np.random.default_rng(6)
        R3 = np.eye(3)
        R3[:2, :2] = yaw_rot2d(0.7)
        T = se3(R3, [1.0, -2.0, 0.5])
        pts = rng.normal(size=(10, 3))
        hom = np.concatenate([pts, np.ones((10, 1))], axis=1)
        expect = (hom @ T.T)[:, :3]
        assert np.allclose(transform_points(T, pts), expect, atol=1e-12)

    def test_validate_rejects_scaled_rotation(self):
        T = np.eye(4)
        T[:3, :3] *= 1.001
        with pytest.raises(ContractError):
            validate_rigid(T)

    def test_validate_rejects_bad_bottom_row(self):
        T = np.eye(4)
        T[3, 0] = 0.1
        with pytest.raises(ContractError):
            validate_rigid(T)


class TestCameras:
    def test_intrinsics_contracts(self):
        bad = np.array([[10.0, 0.0, 8.0], [1.0, 10.0, 8.0], [0.0, 0.0, 1.0]])
        with pytest.raises(ContractError):
            Camera(intrinsics=bad, extrinsics=np.eye(4), image_h=16, image_w=16)
        neg = np.array([[-10.0, 0.0, 8.0], [0.0, 10.0, 8.0], [0.0, 0.0, 1.0]])
        with pytest.raises(ContractError):
            Camera(intrinsics=neg, extrinsics=np.eye(4), image_h=16, image_w=16)

    def test_point_on_axis_projects_to_principal_point(self):
        K = np.array([[20.0, 0.0, 8.0], [0.0, 20.0, 8.0], [0.0, 0.0, 1.0]])
        cam = Camera(intrinsics=K, extrinsics=np.eye(4), image_h=16, image_w=16)
        uv, vis = cam.project(np.array([[0.0, 0.0, 5.0]]))
        assert vis[0]
        assert np.allclose(uv[0], [8.0, 8.0])

    def test_behind_camera_not_visible(self):
        K = np.array([[20.0, 0.0, 8.0], [0.0, 20.0, 8.0], [0.0, 0.0, 1.0]])
        cam = Camera(intrinsics=K, extrinsics=np.eye(4), image_h=16, image_w=16)
        uv, vis = cam.project(np.array([[0.0, 0.0, -5.0], [0.0, 0.0, 0.0]]))
        assert not vis.any()

    def test_projection_scales_with_depth(self):
        K = np.array([[20.0, 0.0, 8.0], [0.0, 20.0, 8.0], [0.0, 0.0, 1.0]])
        cam = Camera(intrinsics=K, extrinsics=np.eye(4), image_h=16, image_w=16)
        uv, vis = cam.project(np.array([[1.0, 0.0, 5.0], [2.0, 0.0, 10.0]]))
        assert vis.all()
        assert np.allclose(uv[0], uv[1])

    def test_rig_needs_cameras(self):
        with pytest.raises(ContractError):
            CameraRig(cameras=())


class TestRigCoverage:
    def test_ring_sees_all_ground_directions(self):
        rig = make_rig(n_cams=4, fov_deg=100.0, image_w=64, image_h=64)
        rng = np.random.default_rng(8)
        ang = rng.uniform(-np.pi, np.pi, 200)
        pts = np.stack([6.0 * np.cos(ang), 6.0 * np.sin(ang),
                        np.full(200, 1.0)], axis=1)
        hits = np.zeros(200, dtype=bool)
        for uv, vis in project_to_cameras(rig, pts):
            hits |= vis
        assert hits.all()

    def test_forward_camera_centers_forward_point(self):
        rig = make_rig(n_cams=4, fov_deg=100.0, image_w=64, image_h=64,
                       cam_height=1.5)
        uv, vis = rig.cameras[0].project(np.array([[10.0, 0.0, 1.5]]))
        assert vis[0]
        assert np.allclose(uv[0], [32.0, 32.0], atol=1e-9)

    def test_all_extrinsics_are_rigid(self):
        rig = make_rig(n_cams=6)
        for cam in rig.cameras:
            validate_rigid(cam.extrinsics)
