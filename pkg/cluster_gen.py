#!/usr/bin/env python3
"""
聚类先验生成：对 Foreground + Unlabeled 点做 DBSCAN，只保留含前景证据的簇
"""

import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from errors import ConfigError, DataError
from label_transfer import CoarseLabel

logger = logging.getLogger(__name__)

_NEIGHBOR_OFFSETS = np.array([(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)],
                             dtype=np.int64)


@dataclass
class ClusterSet:
    """逐点簇编号（-1 为噪声/未参与）及各簇成员"""

    assignment: np.ndarray
    num_clusters: int
    members: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def from_assignment(cls, assignment: np.ndarray) -> "ClusterSet":
        assignment = np.asarray(assignment, dtype=np.int64).reshape(-1)
        num_clusters = int(assignment.max()) + 1 if len(assignment) and assignment.max() >= 0 else 0
        order = np.argsort(assignment, kind="stable")
        bounds = np.searchsorted(assignment[order], np.arange(num_clusters + 1))
        members = [order[bounds[c]:bounds[c + 1]] for c in range(num_clusters)]
        return cls(assignment, num_clusters, members)

    @classmethod
    def empty(cls, count: int = 0) -> "ClusterSet":
        return cls(np.full(count, -1, dtype=np.int64), 0, [])

    def __len__(self) -> int:
        return self.num_clusters

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(m) for m in self.members], dtype=np.int64)

    @property
    def noise_count(self) -> int:
        return int((self.assignment < 0).sum())

    def validate(self) -> "ClusterSet":
        if len(self.members) != self.num_clusters:
            raise DataError(f"簇成员表数量 {len(self.members)} 与簇数 {self.num_clusters} 不一致")
        for cluster_id, member in enumerate(self.members):
            if len(member) == 0 or (self.assignment[member] != cluster_id).any():
                raise DataError(f"簇 {cluster_id} 的成员表与逐点编号不一致")
        if self.num_clusters and (self.assignment >= self.num_clusters).any():
            raise DataError("簇编号超出范围")
        return self


def _cell_table(keys: np.ndarray) -> Tuple[np.ndarray, Dict[Tuple[int, int, int], np.ndarray]]:
    unique_keys, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(len(unique_keys) + 1))
    cells = {tuple(int(v) for v in unique_keys[c]): order[bounds[c]:bounds[c + 1]]
             for c in range(len(unique_keys))}
    return unique_keys, cells


def region_query(coords: np.ndarray, eps: float, threads: int = 1) -> List[np.ndarray]:
    """每个点 eps 球内（含边界、含自身）的邻居，按下标升序

    空间哈希网格的格子边长为 eps，只需检查相邻 27 个格子。
    """
    coords = np.asarray(coords, dtype=np.float64)[:, :3]
    keys = np.floor(coords / eps).astype(np.int64)
    unique_keys, cells = _cell_table(keys)
    eps_sq = eps * eps
    neighbors: List[np.ndarray] = [None] * len(coords)

    def process(key: np.ndarray) -> None:
        own = cells[tuple(int(v) for v in key)]
        blocks = [cells.get(tuple(int(v) for v in key + offset)) for offset in _NEIGHBOR_OFFSETS]
        candidates = np.sort(np.concatenate([b for b in blocks if b is not None]))
        diff = coords[own][:, None, :] - coords[candidates][None, :, :]
        within = (diff * diff).sum(axis=2) <= eps_sq
        for row, point in enumerate(own):
            neighbors[point] = candidates[within[row]]

    if threads > 1 and len(unique_keys) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(process, unique_keys))
    else:
        for key in unique_keys:
            process(key)
    return neighbors


def dbscan(coords: np.ndarray, eps: float, min_pts: int, threads: int = 1) -> ClusterSet:
    """DBSCAN

    核心点：eps 邻域内（含自身）至少 min_pts 个点。按下标升序选种子做广度扩展，
    可被多个簇到达的边界点归属最先发现它的簇。
    """
    if eps <= 0:
        raise ConfigError(f"DBSCAN eps 必须 > 0: {eps}")
    if min_pts < 1:
        raise ConfigError(f"DBSCAN min_pts 必须 >= 1: {min_pts}")
    coords = np.asarray(coords, dtype=np.float64)
    if len(coords) == 0:
        return ClusterSet.empty()

    neighbors = region_query(coords, eps, threads)
    core = np.array([len(n) >= min_pts for n in neighbors])
    assignment = np.full(len(coords), -1, dtype=np.int64)

    cluster_id = 0
    for seed in np.flatnonzero(core):
        if assignment[seed] != -1:
            continue
        assignment[seed] = cluster_id
        queue = deque([seed])
        while queue:
            point = queue.popleft()
            for other in neighbors[point]:
                if assignment[other] == -1:
                    assignment[other] = cluster_id
                    if core[other]:
                        queue.append(other)
        cluster_id += 1

    clusters = ClusterSet.from_assignment(assignment)
    logger.debug(f"DBSCAN: {len(coords)} 点 -> {clusters.num_clusters} 簇, 噪声 {clusters.noise_count}")
    return clusters


def filter_foreground(clusters: ClusterSet, labels: np.ndarray) -> ClusterSet:
    """只保留至少含一个 Foreground 点的簇，编号按原顺序重新压缩"""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(labels) != len(clusters.assignment):
        raise DataError(f"标签数 {len(labels)} 与聚类点数 {len(clusters.assignment)} 不一致")

    keep = [c for c, member in enumerate(clusters.members)
            if (labels[member] == CoarseLabel.FOREGROUND).any()]
    remap = np.full(clusters.num_clusters + 1, -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    assignment = remap[clusters.assignment]  # -1 落到末尾的 -1
    dropped = clusters.num_clusters - len(keep)
    if dropped:
        logger.debug(f"过滤掉 {dropped} 个不含前景点的簇")
    return ClusterSet(assignment, len(keep), [clusters.members[c] for c in keep])


def cluster_centers(clusters: ClusterSet, coords: np.ndarray) -> np.ndarray:
    """各簇成员坐标的算术平均 (N_c, 3)"""
    coords = np.asarray(coords, dtype=np.float64)[:, :3]
    if not clusters.num_clusters:
        return np.zeros((0, 3))
    return np.stack([coords[member].mean(axis=0) for member in clusters.members])


def clusterable_mask(labels: np.ndarray) -> np.ndarray:
    """参与聚类的点：Foreground 与 Unlabeled"""
    labels = np.asarray(labels, dtype=np.int64)
    return (labels == CoarseLabel.FOREGROUND) | (labels == CoarseLabel.UNLABELED)


def generate_clusters(coords: np.ndarray, labels: np.ndarray, eps: float, min_pts: int,
                      threads: int = 1) -> ClusterSet:
    """在整幅堆叠点云上生成过滤后的簇，未参与聚类的点编号为 -1"""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(labels) != len(coords):
        raise DataError(f"标签数 {len(labels)} 与点数 {len(coords)} 不一致")
    selected = np.flatnonzero(clusterable_mask(labels))
    local = filter_foreground(dbscan(np.asarray(coords)[selected], eps, min_pts, threads), labels[selected])

    assignment = np.full(len(coords), -1, dtype=np.int64)
    assignment[selected] = local.assignment
    return ClusterSet(assignment, local.num_clusters, [selected[m] for m in local.members])


def write_cluster_file(path: Union[str, Path], assignment: np.ndarray) -> None:
    Path(path).write_bytes(np.asarray(assignment, dtype="<i4").tobytes())


def read_cluster_file(path: Union[str, Path]) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % 4 != 0:
        raise DataError(f"簇文件 {path} 长度 {len(raw)} 不是 4 的倍数，截断于偏移 {len(raw) - len(raw) % 4}")
    return np.frombuffer(raw, dtype="<i4").astype(np.int64)
