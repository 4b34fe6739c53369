#!/usr/bin/env python3
"""
簇分支：实例特征聚合、跨帧分组向量注意力（簇时序增强）与逐点回填
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

import tensor_kernels as tk
from backbone_lite import FeatureMatrix
from cluster_gen import ClusterSet, cluster_centers
from config import PipelineConfig
from errors import ConfigError, DataError, ShapeError, UsageError
from pointcloud_core import Pose
from tensor_kernels import ParamStore, Tensor

logger = logging.getLogger(__name__)


@dataclass
class ClusterFeatures:
    """簇特征 U (N_c, D) 与簇中心 G (N_c, 3)"""

    features: Tensor
    centers: np.ndarray
    frame: int = 0

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        if self.features.ndim != 2 or len(self.features) != len(self.centers):
            raise ShapeError("簇特征行数与簇中心数不一致", self.features.shape, self.centers.shape)

    @property
    def count(self) -> int:
        return len(self.centers)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @classmethod
    def empty(cls, dim: int, frame: int = 0) -> "ClusterFeatures":
        return cls(Tensor(np.zeros((0, dim))), np.zeros((0, 3)), frame)

    def detach(self) -> "ClusterFeatures":
        return ClusterFeatures(tk.detach(self.features), self.centers.copy(), self.frame)


def init_cluster_params(store: ParamStore, dim: int, groups: int, prefix: str = "tce") -> None:
    if groups < 1 or dim % groups != 0:
        raise ConfigError(f"分组数 {groups} 必须整除特征维度 {dim}")
    for name in ("query", "key", "value"):
        store.create(f"{prefix}/{name}/w", (dim, dim))
        store.create(f"{prefix}/{name}/b", (dim,), init="zeros")
    store.create(f"{prefix}/pos/w1", (3, dim))
    store.create(f"{prefix}/pos/b1", (dim,), init="zeros")
    store.create(f"{prefix}/pos/w2", (dim, dim))
    store.create(f"{prefix}/pos/b2", (dim,), init="zeros")
    store.create(f"{prefix}/weight/w", (dim, groups))
    store.create(f"{prefix}/weight/b", (groups,), init="zeros")


def aggregate_instance(features: FeatureMatrix, clusters: ClusterSet, frame: int = 0) -> ClusterFeatures:
    """簇内点特征取平均得到 U_t，坐标平均得到 G_t"""
    if len(clusters.assignment) != features.count:
        raise DataError(f"簇编号数 {len(clusters.assignment)} 与特征行数 {features.count} 不一致")
    if any(len(member) == 0 for member in clusters.members):
        raise DataError("存在空簇")
    pooled = tk.segment_mean(features.features, clusters.assignment, clusters.num_clusters)
    return ClusterFeatures(pooled, cluster_centers(clusters, features.coords), frame)


def merge_temporal_clusters(current: ClusterFeatures, previous: Optional[ClusterFeatures],
                            pose: Pose) -> ClusterFeatures:
    """当前簇在前，经 pose (T^t_{t-1}) 变换的上一帧簇在后"""
    if previous is None or previous.count == 0:
        return current
    if previous.dim != current.dim:
        raise ShapeError("上一帧簇特征维度不一致", previous.features.shape, current.features.shape)
    return ClusterFeatures(tk.concat([current.features, previous.features], axis=0),
                           np.concatenate([current.centers, pose.apply(previous.centers)]),
                           current.frame)


def tce_neighbors(query_centers: np.ndarray, pool_centers: np.ndarray, k: int) -> np.ndarray:
    """按 (距离, 下标) 排序取最近的 k 个池中簇"""
    diff = pool_centers[None, :, :] - query_centers[:, None, :]
    dist_sq = (diff * diff).sum(axis=2)
    index = np.broadcast_to(np.arange(len(pool_centers)), dist_sq.shape)
    return np.lexsort((index, dist_sq), axis=1)[:, :k]


def tce_attention(current: ClusterFeatures, pool: ClusterFeatures, store: ParamStore, groups: int,
                  k_nn: int, prefix: str = "tce",
                  return_weights: bool = False) -> Union[Tensor, Tuple[Tensor, np.ndarray]]:
    """分组向量注意力

    w_ij = ω(k_j - q_i + δ(g'_j - g_i))，在邻居轴上按组 softmax，输出为各组权重
    乘以对应通道段的 v_j 之和。只有当前帧的簇作为查询。
    """
    dim = current.dim
    if groups < 1 or dim % groups != 0:
        raise ConfigError(f"分组数 {groups} 必须整除特征维度 {dim}")
    if k_nn < 1:
        raise ConfigError(f"TCE 邻居数必须 >= 1: {k_nn}")
    if pool.count == 0:
        raise UsageError("注意力的簇池为空")
    if current.count == 0:
        empty = Tensor(np.zeros((0, dim), dtype=current.features.dtype))
        return (empty, np.zeros((0, 0, groups))) if return_weights else empty

    n_query = current.count
    k = min(k_nn, pool.count)
    neighbors = tce_neighbors(current.centers, pool.centers, k)

    def project(x: Tensor, name: str) -> Tensor:
        return tk.linear(x, store[f"{prefix}/{name}/w"], store[f"{prefix}/{name}/b"])

    query = project(current.features, "query")
    keys = tk.reshape(tk.index_rows(project(pool.features, "key"), neighbors.reshape(-1)), (n_query, k, dim))
    values = tk.index_rows(project(pool.features, "value"), neighbors.reshape(-1))

    relative = Tensor(pool.centers[neighbors] - current.centers[:, None, :], dtype=current.features.dtype)
    position = tk.linear(tk.gelu(tk.linear(relative, store[f"{prefix}/pos/w1"], store[f"{prefix}/pos/b1"])),
                         store[f"{prefix}/pos/w2"], store[f"{prefix}/pos/b2"])

    relation = tk.add(tk.sub(keys, tk.reshape(query, (n_query, 1, dim))), position)
    weights = tk.softmax(project(relation, "weight"), axis=1)  # (N_c, k, h)

    grouped = tk.reshape(values, (n_query, k, groups, dim // groups))
    attended = tk.reduce_sum(tk.mul(tk.reshape(weights, (n_query, k, groups, 1)), grouped), axis=1)
    output = tk.reshape(attended, (n_query, dim))
    return (output, weights.data.copy()) if return_weights else output


def scatter_cluster_feats(cluster_feats: Tensor, clusters: ClusterSet, num_points: int) -> Tensor:
    """簇特征回填到所属点，未聚类的点为零行"""
    if len(clusters.assignment) != num_points:
        raise DataError(f"簇编号数 {len(clusters.assignment)} 与点数 {num_points} 不一致")
    if len(cluster_feats) != clusters.num_clusters:
        raise ShapeError("簇特征行数与簇数不一致", cluster_feats.shape, (clusters.num_clusters,))
    return tk.index_rows(cluster_feats, clusters.assignment, allow_missing=True)


def cluster_branch_forward(features: FeatureMatrix, clusters: ClusterSet, previous: Optional[ClusterFeatures],
                           pose: Pose, store: ParamStore, config: PipelineConfig, frame: int = 0,
                           prefix: str = "tce") -> Tuple[Tensor, ClusterFeatures]:
    """返回逐点簇特征 H^c_t 以及供下一帧使用的（未经注意力、已分离梯度的）簇特征"""
    current = aggregate_instance(features, clusters, frame)
    if current.count == 0:
        logger.debug(f"帧 {frame} 没有保留下来的簇")
        zeros = Tensor(np.zeros((features.count, features.dim), dtype=features.features.dtype))
        return zeros, current.detach()

    pool = merge_temporal_clusters(current, previous if config.use_history_clusters else None, pose)
    attended = tce_attention(current, pool, store, config.groups, config.cluster_knn, prefix)
    return scatter_cluster_feats(attended, clusters, features.count), current.detach()
