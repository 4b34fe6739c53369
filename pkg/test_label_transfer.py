#!/usr/bin/env python3
"""
标签迁移测试：体素投票与真值对照
"""

from collections import Counter

import numpy as np
import pytest

from config import PipelineConfig
from errors import ConfigError, DataError, UsageError
from label_transfer import (TIE_PRIORITY, ClassMap, CoarseLabel, assign_ground, assign_nonground, coarse_map,
                            read_label_file, transfer_labels, write_label_file)
from pointcloud_core import Pose

ROAD, BUILDING, VEGETATION, CAR, TRUCK, PERSON = range(6)


def brute_force_vote(current, history, labels, cell, allowed):
    """逐点统计同一体素内的历史票数"""
    cell = np.asarray(cell)
    hist_keys = [tuple(k) for k in np.floor(history / cell).astype(np.int64)]
    result = []
    for key in np.floor(current / cell).astype(np.int64):
        tally = Counter(int(l) for k, l in zip(hist_keys, labels) if k == tuple(key) and int(l) in allowed)
        if not tally:
            result.append(int(CoarseLabel.UNLABELED))
            continue
        best = max(tally.values())
        result.append(next(int(p) for p in TIE_PRIORITY if tally.get(int(p), 0) == best))
    return np.asarray(result)


def test_class_map_from_config():
    class_map = ClassMap.from_config(PipelineConfig())
    coarse = coarse_map(np.array([ROAD, BUILDING, VEGETATION, CAR, TRUCK, PERSON]), class_map)
    np.testing.assert_array_equal(coarse, [3, 1, 1, 2, 2, 2])


def test_class_map_rejects_bad_config():
    with pytest.raises(ConfigError):
        ClassMap.from_names(["road", "car"], ["road"], ["bicycle"])
    with pytest.raises(ConfigError):
        ClassMap.from_names(["road", "car"], ["road"], ["road"])


def test_coarse_map_unknown_id():
    with pytest.raises(DataError, match="17"):
        coarse_map(np.array([0, 17]), ClassMap.from_config(PipelineConfig()))


@pytest.mark.parametrize("seed", range(5))
def test_nonground_vote_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    history = rng.uniform(0.0, 1.0, size=(300, 3))
    labels = rng.integers(0, 4, 300)
    current = rng.uniform(0.0, 1.2, size=(150, 3))
    cell = (0.25, 0.25, 0.25)
    expected = brute_force_vote(current, history, labels, cell, {1, 2})
    np.testing.assert_array_equal(assign_nonground(current, history, labels, cell), expected)


@pytest.mark.parametrize("seed", range(3))
def test_ground_vote_matches_brute_force(seed):
    rng = np.random.default_rng(100 + seed)
    history = rng.uniform(-20.0, 20.0, size=(200, 3)) * np.array([1.0, 1.0, 0.02])
    labels = rng.integers(0, 4, 200)
    current = rng.uniform(-20.0, 20.0, size=(100, 3)) * np.array([1.0, 1.0, 0.02])
    cell = (10.0, 10.0, 0.2)
    expected = brute_force_vote(current, history, labels, cell, {3})
    np.testing.assert_array_equal(assign_ground(current, history, labels, cell), expected)


def test_tie_prefers_foreground():
    history = np.full((4, 3), 0.05)
    current = np.array([[0.1, 0.1, 0.1]])
    labels = np.array([CoarseLabel.BACKGROUND, CoarseLabel.FOREGROUND] * 2)
    assert assign_nonground(current, history, labels)[0] == CoarseLabel.FOREGROUND


def test_empty_voxel_stays_unlabeled():
    history = np.zeros((3, 3)) + 0.05
    labels = np.full(3, int(CoarseLabel.BACKGROUND))
    current = np.array([[5.0, 5.0, 5.0]])
    assert assign_nonground(current, history, labels)[0] == CoarseLabel.UNLABELED


def test_nonground_ignores_roadlike_history():
    history = np.full((5, 3), 0.05)
    labels = np.array([3, 3, 3, 3, 1])
    assert assign_nonground(np.array([[0.1, 0.1, 0.1]]), history, labels)[0] == CoarseLabel.BACKGROUND


def grid_scene(seed):
    """每个点独占一个体素的网格场景"""
    rng = np.random.default_rng(seed)
    ij = np.stack(np.meshgrid(np.arange(6), np.arange(6), np.arange(3), indexing="ij"), axis=-1).reshape(-1, 3)
    coords = ij.astype(np.float64) + 0.1
    fine = rng.integers(0, 6, len(coords))
    return coords, fine


def test_static_transfer_reproduces_coarse_truth():
    coords, fine = grid_scene(0)
    class_map = ClassMap.from_config(PipelineConfig())
    result = transfer_labels(coords, [(coords, fine)], [Pose.identity()])
    np.testing.assert_array_equal(result, coarse_map(fine, class_map))


def test_transfer_applies_pose():
    coords, fine = grid_scene(1)
    class_map = ClassMap.from_config(PipelineConfig())
    shift = np.array([2.0, -1.0, 0.0])
    result = transfer_labels(coords + shift, [(coords, fine)], [Pose.from_translation(shift)])
    np.testing.assert_array_equal(result, coarse_map(fine, class_map))


def test_transfer_requires_history():
    with pytest.raises(UsageError):
        transfer_labels(np.zeros((2, 3)), [], [])
    with pytest.raises(ConfigError):
        transfer_labels(np.zeros((2, 3)), [(np.zeros((2, 3)), np.zeros(2, dtype=int))], [])


def test_label_file_round_trip(tmp_path):
    semantic = np.array([0, 3, 5, 1])
    motion = np.array([0, 1, 0, 1])
    path = tmp_path / "000000.label"
    write_label_file(path, semantic, motion)
    assert path.stat().st_size == 4 * len(semantic)
    sem, mov = read_label_file(path)
    np.testing.assert_array_equal(sem, semantic)
    np.testing.assert_array_equal(mov, motion)


def test_label_file_truncated(tmp_path):
    path = tmp_path / "bad.label"
    path.write_bytes(b"\x01" * 6)
    with pytest.raises(DataError, match="偏移 4"):
        read_label_file(path)
