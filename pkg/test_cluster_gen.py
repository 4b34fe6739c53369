#!/usr/bin/env python3
"""
DBSCAN 与聚类先验测试
"""

from collections import deque

import numpy as np
import pytest

from cluster_gen import (ClusterSet, cluster_centers, clusterable_mask, dbscan, filter_foreground,
                         generate_clusters, read_cluster_file, region_query, write_cluster_file)
from errors import ConfigError, DataError
from label_transfer import CoarseLabel


def reference_dbscan(coords, eps, min_pts):
    """O(n²) 距离矩阵版本"""
    diff = coords[:, None, :] - coords[None, :, :]
    adjacency = (diff * diff).sum(axis=2) <= eps * eps
    neighbors = [np.flatnonzero(row) for row in adjacency]
    core = adjacency.sum(axis=1) >= min_pts
    assignment = np.full(len(coords), -1)
    cluster = 0
    for seed in range(len(coords)):
        if not core[seed] or assignment[seed] != -1:
            continue
        assignment[seed] = cluster
        queue = deque([seed])
        while queue:
            point = queue.popleft()
            for other in neighbors[point]:
                if assignment[other] == -1:
                    assignment[other] = cluster
                    if core[other]:
                        queue.append(other)
        cluster += 1
    return assignment, core


def blob_fixture(seed, count=240):
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-6.0, 6.0, size=(4, 3))
    blobs = centers[rng.integers(0, 4, count)] + rng.normal(scale=0.4, size=(count, 3))
    noise = rng.uniform(-8.0, 8.0, size=(count // 6, 3))
    return np.concatenate([blobs, noise])


@pytest.mark.parametrize("seed", range(50))
def test_dbscan_matches_reference(seed):
    coords = blob_fixture(seed)
    threads = 1 if seed % 2 else 4
    clusters = dbscan(coords, 0.7, 6, threads)
    expected, core = reference_dbscan(coords, 0.7, 6)
    np.testing.assert_array_equal(clusters.assignment, expected)
    assert clusters.num_clusters == expected.max() + 1
    # 核心点的划分与遍历顺序无关
    for c in range(clusters.num_clusters):
        members = clusters.members[c]
        assert (clusters.assignment[members] == c).all()
    core_ids = clusters.assignment[core]
    assert (core_ids >= 0).all()
    clusters.validate()


def test_region_query_inclusive_and_self():
    coords = np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [2.0, 0.0, 0.0]])
    neighbors = region_query(coords, 0.5)
    np.testing.assert_array_equal(neighbors[0], [0, 1])
    np.testing.assert_array_equal(neighbors[2], [2])


def test_min_pts_one_makes_every_point_a_cluster():
    coords = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [20.0, 0.0, 0.0]])
    clusters = dbscan(coords, 1.0, 1)
    np.testing.assert_array_equal(clusters.assignment, [0, 1, 2])


def test_dbscan_rejects_bad_parameters():
    with pytest.raises(ConfigError):
        dbscan(np.zeros((3, 3)), 0.0, 2)
    with pytest.raises(ConfigError):
        dbscan(np.zeros((3, 3)), 1.0, 0)
    assert dbscan(np.zeros((0, 3)), 1.0, 2).num_clusters == 0


def test_filter_foreground_compacts_ids():
    clusters = ClusterSet.from_assignment(np.array([0, 0, 1, 1, 2, -1]))
    labels = np.array([CoarseLabel.UNLABELED, CoarseLabel.UNLABELED, CoarseLabel.FOREGROUND,
                       CoarseLabel.UNLABELED, CoarseLabel.FOREGROUND, CoarseLabel.FOREGROUND])
    kept = filter_foreground(clusters, labels)
    np.testing.assert_array_equal(kept.assignment, [-1, -1, 0, 0, 1, -1])
    assert kept.num_clusters == 2
    kept.validate()
    with pytest.raises(DataError):
        filter_foreground(clusters, labels[:3])


def test_cluster_centers_are_means():
    coords = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [5.0, 5.0, 5.0]])
    clusters = ClusterSet.from_assignment(np.array([0, 0, 1]))
    np.testing.assert_allclose(cluster_centers(clusters, coords), [[1.0, 0.0, 0.0], [5.0, 5.0, 5.0]])
    assert cluster_centers(ClusterSet.empty(3), coords).shape == (0, 3)


def test_generate_clusters_excludes_background():
    rng = np.random.default_rng(7)
    car = rng.normal(scale=0.2, size=(30, 3))
    wall = rng.normal(scale=0.2, size=(30, 3)) + np.array([10.0, 0.0, 0.0])
    unknown = rng.normal(scale=0.2, size=(30, 3)) + np.array([0.0, 10.0, 0.0])
    coords = np.concatenate([car, wall, unknown])
    labels = np.concatenate([
        np.full(30, int(CoarseLabel.FOREGROUND)),
        np.full(30, int(CoarseLabel.BACKGROUND)),
        np.full(30, int(CoarseLabel.UNLABELED)),
    ])
    clusters = generate_clusters(coords, labels, 0.7, 5)
    assert clusters.num_clusters == 1
    assert (clusters.assignment[:30] == 0).all()
    assert (clusters.assignment[30:] == -1).all()
    np.testing.assert_array_equal(clusterable_mask(labels), labels != CoarseLabel.BACKGROUND)


def test_cluster_file_round_trip(tmp_path):
    path = tmp_path / "000000.cluster"
    assignment = np.array([-1, 0, 3, 2])
    write_cluster_file(path, assignment)
    np.testing.assert_array_equal(read_cluster_file(path), assignment)
    path.write_bytes(b"\x00" * 5)
    with pytest.raises(DataError):
        read_cluster_file(path)
