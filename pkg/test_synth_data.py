#!/usr/bin/env python3
"""
合成数据生成与读写测试
"""

import numpy as np
import pytest
from scipy.spatial import cKDTree

from config import Config, PipelineConfig
from errors import ConfigError, DataError
from label_transfer import ClassMap, CoarseLabel, coarse_map
from pointcloud_core import RANGE, relative_pose
from synth_data import (CLASS_ID, MOVING, SceneConfig, SceneObject, generate_sequence, occlusion_filter,
                        read_dataset, read_instance_file, scenario_objects, sequence_dir, write_dataset)

SMALL = PipelineConfig().with_overrides(frames=3, points_per_frame=400)


def world_coords(frame):
    return frame.pose.apply(frame.points[:, :3])


def single_object_scene(noise_sigma, velocity=(1.0, 0.0, 0.0), frames=3):
    car = SceneObject("car", (4.0, 2.0, 1.5), (5.0, 3.0, 0.3), velocity, instance=0)
    return SceneConfig(seed=4, frames=frames, points_per_frame=10 ** 6, noise_sigma=noise_sigma,
                       sensor_range=1000.0, occlusion=False, objects=[car])


def test_same_seed_is_deterministic():
    a, b = generate_sequence(SMALL), generate_sequence(SMALL)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.points, y.points)
        np.testing.assert_array_equal(x.semantic, y.semantic)
        np.testing.assert_array_equal(x.pose.matrix, y.pose.matrix)
    c = generate_sequence(SMALL.with_overrides(seed=1))
    assert not np.array_equal(a[0].points, c[0].points)


def test_frames_respect_budget_and_labels():
    frames = generate_sequence(SMALL)
    assert len(frames) == 3
    for frame in frames:
        assert 0 < len(frame) <= 400
        assert frame.points.dtype == np.float64
        assert frame.semantic.shape == frame.motion.shape == frame.instance.shape == (len(frame),)
        assert np.all(frame.points[:, RANGE] <= SMALL.sensor_range + 1e-3)
    assert sum(int((f.motion == MOVING).sum()) for f in frames) > 0


def test_foreground_points_carry_instances():
    class_map = ClassMap.from_config(SMALL)
    for frame in generate_sequence(SMALL):
        coarse = coarse_map(frame.semantic, class_map)
        assert set(np.unique(coarse)) <= {CoarseLabel.BACKGROUND, CoarseLabel.FOREGROUND, CoarseLabel.ROADLIKE}
        np.testing.assert_array_equal(coarse == CoarseLabel.FOREGROUND, frame.instance >= 0)


def test_static_scenario_has_no_motion():
    for frame in generate_sequence(SMALL.with_overrides(scenario="static")):
        assert (frame.motion == 0).all()


def test_truncation_scenario_moves_with_ego():
    scene = SceneConfig.from_pipeline(SMALL.with_overrides(scenario="truncation"))
    truck = next(o for o in scene.objects if o.class_name == "truck")
    assert truck.size[0] >= 12.0 and truck.velocity[0] == SMALL.ego_speed


def test_moving_object_centroid_exact_without_noise():
    frames = generate_sequence(single_object_scene(0.0))
    centroids = [world_coords(f)[f.semantic == CLASS_ID["car"]].mean(axis=0) for f in frames]
    for a, b in zip(centroids, centroids[1:]):
        np.testing.assert_allclose(b - a, [1.0, 0.0, 0.0], atol=1e-4)


def test_moving_object_centroid_with_noise():
    sigma = 0.05
    frames = generate_sequence(single_object_scene(sigma))
    counts = [int((f.semantic == CLASS_ID["car"]).sum()) for f in frames]
    centroids = [world_coords(f)[f.semantic == CLASS_ID["car"]].mean(axis=0) for f in frames]
    tolerance = 5.0 * sigma / np.sqrt(min(counts))
    for a, b in zip(centroids, centroids[1:]):
        assert np.all(np.abs(b - a - np.array([1.0, 0.0, 0.0])) < tolerance)


def static_config(noise_sigma):
    return PipelineConfig().with_overrides(frames=2, points_per_frame=10 ** 6, noise_sigma=noise_sigma,
                                           scenario="static", occlusion=False, sensor_range=1000.0)


def stacked_distances(frames):
    world = [f.pose for f in frames]
    moved = relative_pose(world, 0, 1).apply(frames[0].points[:, :3])
    distance, _ = cKDTree(frames[1].points[:, :3]).query(moved)
    return distance


def test_static_scene_stacks_exactly():
    assert stacked_distances(generate_sequence(static_config(0.0))).max() < 1e-4


def test_static_scene_stacks_within_noise():
    sigma = 0.02
    assert np.median(stacked_distances(generate_sequence(static_config(sigma)))) < 3.0 * sigma


def test_scene_validation():
    leaving = single_object_scene(0.0, velocity=(5.0, 0.0, 0.0), frames=12)
    with pytest.raises(ConfigError):
        generate_sequence(leaving)
    unknown = SceneConfig(objects=[SceneObject("bicycle", (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))])
    with pytest.raises(ConfigError):
        unknown.validate()
    with pytest.raises(ConfigError):
        scenario_objects("bogus", SceneConfig())


def test_occlusion_keeps_nearest_per_bin():
    xyz = np.array([[10.0, 0.0, 0.0], [5.0, 0.0, 0.0], [0.0, 10.0, 0.0]])
    np.testing.assert_array_equal(occlusion_filter(xyz), [1, 2])


def test_dataset_round_trip(tmp_path):
    frames = generate_sequence(SMALL)
    base = write_dataset(frames, tmp_path, SMALL.sequence)
    assert base == sequence_dir(tmp_path, "00")
    label_file = base / Config.LABEL_DIR / f"000000{Config.LABEL_SUFFIX}"
    assert label_file.stat().st_size == 4 * len(frames[0])

    loaded = read_dataset(tmp_path, SMALL.sequence)
    assert len(loaded) == len(frames)
    for a, b in zip(frames, loaded):
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.semantic, b.semantic)
        np.testing.assert_array_equal(a.motion, b.motion)
        np.testing.assert_array_equal(a.instance, b.instance)
        np.testing.assert_array_equal(a.pose.matrix, b.pose.matrix)
        rotation = b.pose.matrix[:3, :3]
        np.testing.assert_allclose(rotation @ rotation.T, np.eye(3), atol=1e-9)


def test_dataset_without_labels(tmp_path):
    base = write_dataset(generate_sequence(SMALL), tmp_path)
    for path in (base / Config.LABEL_DIR).iterdir():
        path.unlink()
    loaded = read_dataset(tmp_path)
    assert all(frame.semantic is None and not frame.has_labels for frame in loaded)
    assert loaded[0].instance is not None


def test_dataset_errors(tmp_path):
    with pytest.raises(DataError):
        read_dataset(tmp_path)

    base = write_dataset(generate_sequence(SMALL), tmp_path)
    scan = base / Config.SCAN_DIR / f"000001{Config.SCAN_SUFFIX}"
    scan.write_bytes(scan.read_bytes()[:-3])
    with pytest.raises(DataError):
        read_dataset(tmp_path)

    scan.rename(base / Config.SCAN_DIR / f"000005{Config.SCAN_SUFFIX}")
    with pytest.raises(DataError, match="不连续"):
        read_dataset(tmp_path)


def test_instance_file_truncated(tmp_path):
    path = tmp_path / "bad.inst"
    path.write_bytes(b"\x00" * 7)
    with pytest.raises(DataError):
        read_instance_file(path)
