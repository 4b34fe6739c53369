#!/usr/bin/env python3
"""
点云容器、位姿与下采样测试
"""

import numpy as np
import pytest

from errors import ConfigError, DataError
from pointcloud_core import (INTENSITY, RANGE, Pose, Scan, StackedCloud, make_points, read_poses, read_scan_bin,
                             relative_pose, stack_scans, transform_points, voxel_downsample,
                             voxel_downsample_with_inverse, voxel_keys, write_poses, write_scan_bin)


def random_pose(rng: np.random.Generator) -> Pose:
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return Pose.from_rt(q, rng.normal(scale=5.0, size=3))


def test_make_points_computes_range():
    points = make_points([[3.0, 4.0, 0.0], [0.0, 0.0, 2.0]], [0.5, 0.25])
    np.testing.assert_allclose(points[:, RANGE], [5.0, 2.0])
    np.testing.assert_array_equal(points[:, INTENSITY], [0.5, 0.25])


def test_pose_validation():
    bad = np.eye(4)
    bad[0, 0] = 2.0
    with pytest.raises(DataError):
        Pose(bad)
    reflection = np.diag([1.0, 1.0, -1.0, 1.0])
    with pytest.raises(DataError):
        Pose(reflection)
    last_row = np.eye(4)
    last_row[3, 0] = 1.0
    with pytest.raises(DataError):
        Pose(last_row)
    with pytest.raises(DataError):
        Pose(np.full((4, 4), np.nan))


def test_pose_inverse_and_compose():
    rng = np.random.default_rng(0)
    for _ in range(10):
        pose = random_pose(rng)
        np.testing.assert_allclose((pose @ pose.inverse()).matrix, np.eye(4), atol=1e-12)
        other = random_pose(rng)
        xyz = rng.normal(size=(20, 3))
        np.testing.assert_allclose((pose @ other).apply(xyz), pose.apply(other.apply(xyz)), atol=1e-10)


def test_identity_transform_round_trip():
    rng = np.random.default_rng(1)
    points = make_points(rng.normal(scale=10.0, size=(100, 3)), rng.random(100))
    moved = transform_points(points, Pose.identity())
    assert np.abs(moved - points).max() < 1e-6
    pose = random_pose(rng)
    back = transform_points(transform_points(points, pose), pose.inverse())
    assert np.abs(back - points).max() < 1e-6


def test_relative_pose_maps_between_frames():
    rng = np.random.default_rng(2)
    world = [random_pose(rng) for _ in range(3)]
    xyz = rng.normal(size=(10, 3))
    in_dst = relative_pose(world, 0, 2).apply(xyz)
    np.testing.assert_allclose(world[2].apply(in_dst), world[0].apply(xyz), atol=1e-10)


def test_stack_scans_tags_offsets():
    scans = [Scan(i, make_points(np.full((i + 2, 3), float(i)))) for i in range(3)]
    poses = [Pose.from_translation((0.0, 0.0, float(2 - i))) for i in range(3)]
    cloud = stack_scans(scans, poses, 2)
    assert cloud.count == 2 + 3 + 4
    np.testing.assert_array_equal(cloud.source_offset, [2, 2, 1, 1, 1, 0, 0, 0, 0])
    np.testing.assert_array_equal(cloud.scan_index, [0, 1, 0, 1, 2, 0, 1, 2, 3])
    assert cloud.max_offset == 2
    np.testing.assert_allclose(cloud.coords[0], [0.0, 0.0, 2.0])
    assert cloud.current_mask().sum() == 4


def test_stack_scans_rejects_future_frames():
    scans = [Scan(3, make_points(np.zeros((1, 3))))]
    with pytest.raises(ConfigError):
        stack_scans(scans, [Pose.identity()], 2)


def test_voxel_keys_floor_negative():
    keys = voxel_keys(np.array([[-0.05, 0.05, 0.1999]]), 0.1)
    np.testing.assert_array_equal(keys, [[-1, 0, 1]])
    with pytest.raises(ConfigError):
        voxel_keys(np.zeros((1, 3)), 0.0)


def test_voxel_downsample_keeps_first_point():
    xyz = np.array([[0.31, 0.0, 0.0], [0.01, 0.0, 0.0], [0.05, 0.0, 0.0], [0.35, 0.0, 0.0], [0.5, 0.0, 0.0]])
    cloud = StackedCloud(make_points(xyz), np.zeros(5, dtype=np.int64))
    down, inverse = voxel_downsample_with_inverse(cloud, 0.1)
    np.testing.assert_array_equal(down.coords[:, 0], [0.31, 0.01, 0.5])
    np.testing.assert_array_equal(inverse, [0, 1, 1, 0, 2])
    np.testing.assert_array_equal(down.scan_index, [0, 1, 4])


def test_voxel_downsample_inverse_consistency():
    rng = np.random.default_rng(3)
    cloud = StackedCloud(make_points(rng.uniform(-5, 5, size=(2000, 3))), rng.integers(0, 3, 2000), max_offset=2)
    down, inverse = voxel_downsample_with_inverse(cloud, 0.5)
    keys = voxel_keys(cloud.coords, 0.5)
    np.testing.assert_array_equal(voxel_keys(down.coords, 0.5)[inverse], keys)
    assert len(np.unique(voxel_keys(down.coords, 0.5), axis=0)) == down.count
    assert voxel_downsample(down, 0.5).count == down.count


def test_scan_bin_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    xyz = rng.normal(size=(50, 3)).astype(np.float32).astype(np.float64)
    intensity = rng.random(50).astype(np.float32).astype(np.float64)
    points = make_points(xyz, intensity)
    path = tmp_path / "000000.bin"
    write_scan_bin(path, points)
    assert path.stat().st_size == 16 * 50
    scan = read_scan_bin(path, 7)
    assert scan.frame_index == 7
    np.testing.assert_array_equal(scan.points, points)


def test_scan_bin_truncated(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x00" * 20)
    with pytest.raises(DataError, match="偏移 16"):
        read_scan_bin(path)


def test_poses_round_trip_exact(tmp_path):
    rng = np.random.default_rng(5)
    poses = [random_pose(rng) for _ in range(4)]
    path = tmp_path / "poses.txt"
    write_poses(path, poses)
    loaded = read_poses(path)
    assert len(loaded) == 4
    for a, b in zip(poses, loaded):
        np.testing.assert_array_equal(a.matrix, b.matrix)


def test_poses_malformed_line(tmp_path):
    path = tmp_path / "poses.txt"
    path.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0\n", encoding="utf-8")
    with pytest.raises(DataError, match="第 2 行"):
        read_poses(path)
