import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mimic.camgeom import (
    CameraModel, ColoredPointCloud, Extrinsic, Rigid, compose_rigid, default_camera, read_depth,
    read_ppm, splat_render, to_uint8, unproject, write_depth, write_ppm,
)
from mimic.errors import DimensionMismatch, FormatError
from mimic.trajcore import Pose, points_to_ego


def flat_cam(size=16, f=8.0):
    # optical axis along robot +x, no offset: camera frame is a pure axis permutation
    return CameraModel(f, f, size / 2 - 0.5, size / 2 - 0.5, size, size)


def test_unproject_principal_and_diagonal_rays():
    cam = CameraModel(10.0, 10.0, 4.0, 3.0, 8, 6)
    depth = np.zeros((6, 8))
    depth[3, 4] = 2.0
    rgb = np.full((6, 8, 3), 0.3)
    cloud = unproject(depth, rgb, cam)
    # camera (0, 0, 2) is robot (2, 0, 0) for the identity extrinsic
    assert np.allclose(cloud.xyz, [[2.0, 0.0, 0.0]])
    cam2 = CameraModel(2.0, 2.0, 1.0, 1.0, 4, 4)
    d2 = np.zeros((4, 4))
    d2[1, 3] = 1.0  # u = cx + fx
    p = unproject(d2, np.zeros((4, 4, 3)), cam2).xyz[0]
    assert np.allclose(p, [1.0, -1.0, 0.0])  # optical x right is robot -y


def test_unproject_counts_valid_pixels_only():
    cam = flat_cam(8)
    depth = np.full((8, 8), 3.0)
    depth[0, :] = 0.0
    depth[1, 0] = np.nan
    cloud = unproject(depth, np.zeros((8, 8, 3)), cam)
    assert len(cloud) == 64 - 8 - 1
    assert len(unproject(np.zeros((8, 8)), np.zeros((8, 8, 3)), cam)) == 0


def test_unproject_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        unproject(np.ones((4, 4)), np.zeros((4, 5, 3)), flat_cam(4))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_reprojection_round_trip(seed):
    rng = np.random.default_rng(seed)
    cam = default_camera(16)
    depth = rng.uniform(0.5, 20.0, size=(16, 16))
    rgb = to_uint8(rng.random((16, 16, 3))) / 255.0
    img, cov = splat_render(unproject(depth, rgb, cam), cam, Pose(0, 0, 0), splat_px=1)
    assert cov.all()
    assert np.max(np.abs(img - rgb)) <= 1 / 255 + 1e-12


def test_projected_pixel_matches_source():
    cam = default_camera(16)
    rng = np.random.default_rng(3)
    depth = rng.uniform(1, 10, size=(16, 16))
    cloud = unproject(depth, np.zeros((16, 16, 3)), cam)
    p = compose_rigid(Pose(0, 0, 0), cam.extrinsic).apply(cloud.xyz)
    u, v, _ = cam.project(p)
    vv, uu = np.mgrid[0:16, 0:16]
    assert np.max(np.abs(u - uu.ravel())) < 0.5 and np.max(np.abs(v - vv.ravel())) < 0.5


def test_zbuffer_nearest_wins_in_any_order():
    cam = flat_cam(8)
    xyz = np.array([[2.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    rgb = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    for order in ([0, 1], [1, 0]):
        img, cov = splat_render(ColoredPointCloud(xyz[order], rgb[order]), cam, Pose(0, 0, 0), splat_px=1)
        covered = np.argwhere(cov)
        assert len(covered) == 1
        assert img[tuple(covered[0])].tolist() == [0.0, 1.0, 0.0]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_zbuffer_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    cam = flat_cam(12)
    n = 200
    xyz = np.column_stack([rng.uniform(1, 6, n), rng.uniform(-2, 2, n), rng.uniform(-2, 2, n)])
    # duplicate depths on purpose so the color tie-break is exercised
    xyz[::7, 0] = 3.0
    rgb = rng.random((n, 3))
    perm = rng.permutation(n)
    a = splat_render(ColoredPointCloud(xyz, rgb), cam, Pose(0, 0, 0), splat_px=2)
    b = splat_render(ColoredPointCloud(xyz[perm], rgb[perm]), cam, Pose(0, 0, 0), splat_px=2)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_empty_cloud_renders_all_holes():
    cam = flat_cam(6)
    img, cov = splat_render(ColoredPointCloud(np.zeros((0, 3)), np.zeros((0, 3))), cam, Pose(0, 0, 0))
    assert not cov.any()
    assert np.all(img == 0.5)


def test_lateral_translation_shifts_plane():
    # fronto-parallel plane at depth 4, cloud moved 1 m left -> shift of fx / 4 px
    cam = flat_cam(32, f=16.0)
    depth = np.full((32, 32), 4.0)
    rgb = np.zeros((32, 32, 3))
    rgb[:, 10] = 1.0  # a bright column
    cloud = unproject(depth, rgb, cam)
    moved = ColoredPointCloud(cloud.xyz + np.array([0.0, 1.0, 0.0]), cloud.rgb)
    img, _ = splat_render(moved, cam, Pose(0, 0, 0), splat_px=1)
    cols = np.flatnonzero(img[16, :, 0] == 1.0)
    # moving the scene left moves it toward smaller u
    assert cols.tolist() == [10 - 16 // 4]


def test_compose_rigid_examples():
    ident = compose_rigid(Pose(0, 0, 0), Extrinsic())
    assert np.allclose(ident.R @ Extrinsic().camera_to_robot().R, np.eye(3))
    yaw = Rigid.from_pose(Pose(0, 0, math.pi)) @ Rigid.from_pose(Pose(0, 0, -math.pi))
    assert np.allclose(yaw.matrix(), np.eye(4))
    tr = Rigid.from_pose(Pose(1, 0, 0)) @ Rigid.from_pose(Pose(0, 1, 0))
    assert np.allclose(tr.t, [1, 1, 0])


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-3, 3), st.floats(-5, 5), st.floats(-5, 5))
def test_compose_rigid_agrees_with_ego_transform(x, y, psi, px, py):
    pose = Pose(x, y, psi)
    world_to_robot = Rigid.from_pose(pose).inverse()
    ego = points_to_ego(np.array([[px, py]]), pose)[0]
    assert np.allclose(world_to_robot.apply(np.array([px, py, 0.0]))[:2], ego, atol=1e-9)


def test_camera_feature_vector_round_trip():
    cam = default_camera(32)
    v = cam.feature_vector
    assert v.shape == (16,) and np.all(v[12:] == 0)
    assert CameraModel.from_feature_vector(v) == cam
    with pytest.raises(DimensionMismatch):
        CameraModel.from_feature_vector(v[:15])


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraModel(0.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(ValueError):
        CameraModel(1.0, 1.0, 4.0, 1.0, 4, 4)


def test_depth_file_round_trip(tmp_path):
    d = np.array([[1.5, 0.0], [np.nan, 42.0], [3.25, 7.0]])
    write_depth(tmp_path / "a.depth", d)
    raw = (tmp_path / "a.depth").read_bytes()
    assert raw.startswith(b"MDPT1\n2 3\n") and len(raw) == len(b"MDPT1\n2 3\n") + 24
    back = read_depth(tmp_path / "a.depth")
    assert np.array_equal(back, np.nan_to_num(d).astype(np.float32))


def test_depth_file_rejects_truncation(tmp_path):
    write_depth(tmp_path / "a.depth", np.ones((2, 2)))
    raw = (tmp_path / "a.depth").read_bytes()
    (tmp_path / "b.depth").write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        read_depth(tmp_path / "b.depth")
    (tmp_path / "c.depth").write_bytes(b"XXXX" + raw)
    with pytest.raises(FormatError):
        read_depth(tmp_path / "c.depth")


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3)).astype(np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")
    assert np.array_equal(read_ppm(tmp_path / "a.ppm", as_float=False), img)
    assert np.allclose(read_ppm(tmp_path / "a.ppm"), img / 255.0)
