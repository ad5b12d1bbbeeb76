#
# Copyright (C) 2026  scene3d_llm_tool developers
#
# This software is distributed under the terms of the MIT License.
#

import numpy as np
import pytest

from scene3d_llm_tool.geometry import Aabb, CameraIntrinsics, CameraPose, backproject, project, aabb_iou, \
    aabb_center_distance, pixel_rays, InvalidDepthError, OutOfBoundsError, BehindCameraError

from conftest import random_pose


def test_backproject_principal_point(intr):
    p = backproject(intr.cx, intr.cy, 1.0, intr, CameraPose.identity())
    np.testing.assert_allclose(p, [0, 0, 1], atol=1e-12)


def test_backproject_one_focal_length_offset():
    intr = CameraIntrinsics(fx=10.0, fy=10.0, cx=32.0, cy=24.0, width=64, height=48)
    p = backproject(intr.cx + intr.fx, intr.cy, 2.0, intr, CameraPose.identity())
    np.testing.assert_allclose(p, [2, 0, 2], atol=1e-12)


def test_backproject_matches_matrix_oracle(intr):
    rng = np.random.default_rng(1)
    k_inv = np.linalg.inv(intr.matrix)
    for _ in range(100):
        pose = random_pose(rng)
        u = rng.uniform(0, intr.width - 1)
        v = rng.uniform(0, intr.height - 1)
        d = rng.uniform(0.1, 20)
        cam = k_inv @ np.array([u, v, 1.0]) * d
        expected = pose.rotation @ cam + pose.translation
        np.testing.assert_allclose(backproject(u, v, d, intr, pose), expected, atol=1e-9)


def test_backproject_errors(intr):
    pose = CameraPose.identity()
    with pytest.raises(InvalidDepthError):
        backproject(1, 1, 0.0, intr, pose)
    with pytest.raises(InvalidDepthError):
        backproject(1, 1, -1.0, intr, pose)
    with pytest.raises(OutOfBoundsError):
        backproject(intr.width, 1, 1.0, intr, pose)
    with pytest.raises(OutOfBoundsError):
        backproject(1, -0.5, 1.0, intr, pose)


def test_project_inverts_backproject(intr):
    rng = np.random.default_rng(2)
    for _ in range(1000):
        pose = random_pose(rng)
        u = rng.uniform(0, intr.width - 1)
        v = rng.uniform(0, intr.height - 1)
        d = rng.uniform(0.1, 50)
        pu, pv, pd = project(backproject(u, v, d, intr, pose), intr, pose)
        assert abs(pu - u) < 1e-6 and abs(pv - v) < 1e-6 and abs(pd - d) < 1e-6


def test_project_on_axis(intr):
    assert project([0, 0, 1], intr, CameraPose.identity()) == pytest.approx((intr.cx, intr.cy, 1.0))


def test_project_behind_camera(intr):
    with pytest.raises(BehindCameraError):
        project([0, 0, -1], intr, CameraPose.identity())
    with pytest.raises(BehindCameraError):
        project([1, 0, 0], intr, CameraPose.identity())


def test_pose_rejects_reflection():
    with pytest.raises(ValueError):
        CameraPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        CameraPose(np.ones((3, 3)), np.zeros(3))


def test_look_at_points_forward_axis_at_target():
    pose = CameraPose.look_at([5, 0, 0], [0, 0, 0])
    np.testing.assert_allclose(pose.rotation[:, 2], [-1, 0, 0], atol=1e-12)
    # Image "down" is world -z for a camera with z-up
    np.testing.assert_allclose(pose.rotation[:, 1], [0, 0, -1], atol=1e-12)


def test_pixel_rays_depth_conversion(intr):
    pose = CameraPose.identity()
    origin, dirs, z_per_unit = pixel_rays(intr, pose)
    assert dirs.shape == (intr.height, intr.width, 3)
    np.testing.assert_allclose(np.linalg.norm(dirs, axis=-1), 1.0)
    np.testing.assert_allclose(dirs[..., 2], z_per_unit)
    np.testing.assert_allclose(dirs[24, 32], [0, 0, 1], atol=1e-12)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=0.0, fy=1.0, cx=1.0, cy=1.0, width=4, height=4)
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=1.0, fy=1.0, cx=4.0, cy=1.0, width=4, height=4)
    i = CameraIntrinsics.from_fov(64, 48, 90.0)
    assert i.fx == pytest.approx(32.0)
    assert (i.cx, i.cy) == (31.5, 23.5)
    assert CameraIntrinsics.from_dict(i.to_dict()) == i


def test_iou_identical_and_disjoint():
    unit = Aabb([0, 0, 0], [1, 1, 1])
    assert aabb_iou(unit, unit) == 1.0
    assert aabb_iou(unit, unit.translated([2, 0, 0])) == 0.0
    # Touching faces share no volume
    assert aabb_iou(unit, unit.translated([1, 0, 0])) == 0.0


def test_iou_half_shift():
    unit = Aabb([0, 0, 0], [1, 1, 1])
    assert aabb_iou(unit, unit.translated([0.5, 0.5, 0.5])) == pytest.approx(0.125 / 1.875, abs=1e-12)


def test_iou_matches_voxel_counting():
    a = Aabb([0, 0, 0], [1, 1, 1])
    b = Aabb([0.5, 0.5, 0.5], [1.5, 1.5, 1.5])
    n = 200
    centers = (np.arange(n) + 0.5) / n * 1.5
    x, y, z = np.meshgrid(centers, centers, centers, indexing='ij')
    pts = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    in_a = np.all((pts >= a.min) & (pts <= a.max), axis=1)
    in_b = np.all((pts >= b.min) & (pts <= b.max), axis=1)
    counted = np.count_nonzero(in_a & in_b) / np.count_nonzero(in_a | in_b)
    assert aabb_iou(a, b) == pytest.approx(counted, abs=1e-3)


def test_iou_degenerate_is_zero():
    flat = Aabb([0, 0, 0], [1, 1, 0])
    assert aabb_iou(flat, flat) == 0.0
    assert aabb_iou(flat, Aabb([0, 0, 0], [1, 1, 1])) == 0.0


def test_iou_symmetric_and_bounded():
    rng = np.random.default_rng(3)
    for _ in range(200):
        pts = rng.uniform(-3, 3, size=(4, 3))
        a = Aabb(np.minimum(pts[0], pts[1]), np.maximum(pts[0], pts[1]))
        b = Aabb(np.minimum(pts[2], pts[3]), np.maximum(pts[2], pts[3]))
        value = aabb_iou(a, b)
        assert 0.0 <= value <= 1.0
        assert value == pytest.approx(aabb_iou(b, a), abs=1e-15)


def test_center_distance():
    unit = Aabb([0, 0, 0], [1, 1, 1])
    assert aabb_center_distance(unit, unit) == 0.0
    assert aabb_center_distance(unit, unit.translated([3, 4, 0])) == pytest.approx(5.0)
    rng = np.random.default_rng(4)
    for lo_a, lo_b in zip(rng.uniform(-5, 5, (20, 3)), rng.uniform(-5, 5, (20, 3))):
        a = Aabb(lo_a, lo_a + 1)
        b = Aabb(lo_b, lo_b + 2)
        expected = np.sqrt(np.sum((lo_a + 0.5 - (lo_b + 1.0)) ** 2))
        assert aabb_center_distance(a, b) == pytest.approx(expected, abs=1e-12)


def test_aabb_validation_and_lists():
    with pytest.raises(ValueError):
        Aabb([1, 0, 0], [0, 1, 1])
    with pytest.raises(ValueError):
        Aabb.from_list([0, 0, 0, 1, 1])
    box = Aabb.from_list([0, 1, 2, 3, 4, 5])
    assert box.to_list() == [0, 1, 2, 3, 4, 5]
    assert box.contains_point([1, 2, 3])
    assert not box.contains_point([1, 2, 6])


def test_iou_decreases_as_boxes_move_apart():
    rng = np.random.default_rng(5)
    for _ in range(50):
        center = rng.uniform(-2, 2, size=3)
        a = Aabb(center - rng.uniform(0.2, 1.0, 3), center + rng.uniform(0.2, 1.0, 3))
        half = rng.uniform(0.2, 1.0, 3)
        b = Aabb(a.center - half, a.center + half)
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        values = [aabb_iou(a, b.translated(s * direction)) for s in np.linspace(0, 4, 41)]
        assert all(later <= earlier + 1e-12 for earlier, later in zip(values, values[1:]))
        assert values[-1] == 0.0


def test_aabb_overlaps():
    unit = Aabb([0, 0, 0], [1, 1, 1])
    assert unit.overlaps(unit.translated([0.5, 0, 0]))
    assert not unit.overlaps(unit.translated([1, 0, 0]))
    assert unit.intersects(unit.translated([1, 0, 0]))
    assert not unit.overlaps(unit.translated([0.5, 2, 0]))


def test_rigid_pose_keeps_pairwise_distances():
    rng = np.random.default_rng(6)
    points = rng.uniform(-5, 5, size=(20, 3))
    original = np.linalg.norm(points[:, None] - points[None, :], axis=-1)
    for _ in range(20):
        pose = random_pose(rng)
        for moved in (pose.to_world(points), pose.to_camera(points)):
            np.testing.assert_allclose(np.linalg.norm(moved[:, None] - moved[None, :], axis=-1), original,
                                       atol=1e-9)
        np.testing.assert_allclose(pose.to_camera(pose.to_world(points)), points, atol=1e-9)
