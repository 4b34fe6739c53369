#!/usr/bin/env python3
"""
轻量点特征骨干网络

KNN + MLP 局部嵌入，随后 L 轮平面投影 / 3x3 卷积 / 反投影的 token mixing，
依次循环 x-y、x-z、y-z 三个平面。
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

import tensor_kernels as tk
from config import Config, PipelineConfig
from errors import ConfigError, ShapeError
from pointcloud_core import INTENSITY, RANGE, StackedCloud
from tensor_kernels import ParamStore, Tensor

logger = logging.getLogger(__name__)

PLANE_AXES: Dict[str, Tuple[int, int]] = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2)}
PLANE_CYCLE = ("xy", "xz", "yz")
EMBED_CHANNELS = 6  # 相对偏移 3 + 强度 + 距离 + 时间


@dataclass
class FeatureMatrix:
    """N_p x D 逐点特征及对应坐标"""

    features: Tensor
    coords: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)[:, :3]
        if self.features.ndim != 2 or len(self.features) != len(self.coords):
            raise ShapeError("特征行数与坐标数不一致", self.features.shape, self.coords.shape)

    @property
    def count(self) -> int:
        return len(self.coords)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def with_features(self, features: Tensor) -> "FeatureMatrix":
        return FeatureMatrix(features, self.coords)


@dataclass(frozen=True)
class PlaneSpec:
    """轴对齐投影平面：丢弃一个坐标轴，分辨率 rho，网格 H x W"""

    name: str
    rho: float
    origin: Tuple[float, float]
    shape: Tuple[int, int]

    @classmethod
    def from_bounds(cls, name: str, coords: np.ndarray, rho: float, max_cells: int) -> "PlaneSpec":
        """网格覆盖坐标范围，原点对齐到 rho 的整数倍，每边最多 max_cells 格"""
        if name not in PLANE_AXES:
            raise ConfigError(f"未知平面: {name}")
        if rho <= 0:
            raise ConfigError(f"网格分辨率必须 > 0: {rho}")
        coords = np.asarray(coords, dtype=np.float64)[:, list(PLANE_AXES[name])]
        if len(coords) == 0:
            return cls(name, rho, (0.0, 0.0), (1, 1))
        low = np.floor(coords.min(axis=0) / rho) * rho
        extent = np.floor((coords.max(axis=0) - low) / rho).astype(np.int64) + 1
        extent = np.clip(extent, 1, max_cells)
        return cls(name, float(rho), (float(low[0]), float(low[1])), (int(extent[0]), int(extent[1])))

    @property
    def axes(self) -> Tuple[int, int]:
        return PLANE_AXES[self.name]

    def cell_index(self, coords: np.ndarray) -> np.ndarray:
        """(N, 2) 格子坐标；范围外的点夹到边界格"""
        projected = np.asarray(coords, dtype=np.float64)[:, list(self.axes)]
        cells = np.floor((projected - np.asarray(self.origin)) / self.rho).astype(np.int64)
        return np.clip(cells, 0, np.asarray(self.shape) - 1)


def plane_specs(coords: np.ndarray, rho: float, max_cells: int,
                names: Sequence[str] = PLANE_CYCLE) -> Dict[str, PlaneSpec]:
    return {name: PlaneSpec.from_bounds(name, coords, rho, max_cells) for name in names}


def knn_indices(coords: np.ndarray, k: int) -> np.ndarray:
    """每个点的 k 个最近邻（含自身），按距离升序，(N, k)"""
    if k < 1:
        raise ConfigError(f"KNN 邻居数必须 >= 1: {k}")
    coords = np.asarray(coords, dtype=np.float64)[:, :3]
    _, index = cKDTree(coords).query(coords, k=k)
    return np.asarray(index, dtype=np.int64).reshape(len(coords), k)


def canonical_order(cloud: StackedCloud) -> np.ndarray:
    """按 (x, y, z, 强度, 时间) 的字典序排列点，使计算结果与输入顺序无关"""
    points = cloud.points
    return np.lexsort((cloud.source_offset, points[:, INTENSITY], points[:, 2], points[:, 1], points[:, 0]))


def init_backbone_params(store: ParamStore, dim: int, layers: int, prefix: str = "backbone") -> None:
    store.create(f"{prefix}/embed/w1", (EMBED_CHANNELS, dim))
    store.create(f"{prefix}/embed/b1", (dim,), init="zeros")
    store.create(f"{prefix}/embed/w2", (dim, dim))
    store.create(f"{prefix}/embed/b2", (dim,), init="zeros")
    for layer in range(layers):
        store.create(f"{prefix}/mix{layer}/kernel", (3, 3, dim, dim))
        store.create(f"{prefix}/mix{layer}/bias", (dim,), init="zeros")


def embed_channels(cloud: StackedCloud, neighbors: np.ndarray) -> np.ndarray:
    """(N, k, 6) 邻居输入通道"""
    points = cloud.points
    time = cloud.source_offset / max(cloud.max_offset, 1)
    channels = np.empty(neighbors.shape + (EMBED_CHANNELS,), dtype=np.float64)
    channels[..., :3] = points[neighbors, :3] - points[:, None, :3]
    channels[..., 3] = points[neighbors, INTENSITY]
    channels[..., 4] = points[neighbors, RANGE] / Config.RANGE_SCALE
    channels[..., 5] = time[neighbors]
    return channels


def local_embed(cloud: StackedCloud, store: ParamStore, k: int, prefix: str = "backbone",
                neighbors: Optional[np.ndarray] = None) -> FeatureMatrix:
    """KNN 邻域上的共享两层 MLP，再对邻居取最大值"""
    if k < 1:
        raise ConfigError(f"KNN 邻居数必须 >= 1: {k}")
    k = min(k, cloud.count)
    if neighbors is None:
        neighbors = knn_indices(cloud.coords, k)
    channels = Tensor(embed_channels(cloud, neighbors), dtype=store.dtype)

    hidden = tk.gelu(tk.linear(channels, store[f"{prefix}/embed/w1"], store[f"{prefix}/embed/b1"]))
    per_neighbor = tk.linear(hidden, store[f"{prefix}/embed/w2"], store[f"{prefix}/embed/b2"])
    return FeatureMatrix(tk.reduce_max(per_neighbor, axis=1), cloud.coords)


def plane_mix(features: FeatureMatrix, plane: PlaneSpec, kernel: Tensor, bias: Optional[Tensor] = None,
              activation: str = "gelu") -> FeatureMatrix:
    """投影平均 → 3x3 卷积 → 非线性 → 反投影 → 残差相加"""
    cells = plane.cell_index(features.coords)
    grid = tk.scatter_mean(features.features, cells, plane.shape)
    mixed = tk.activation(tk.conv2d(grid, kernel, bias), activation)
    return features.with_features(tk.add(features.features, tk.gather(mixed, cells)))


def backbone_forward(cloud: StackedCloud, store: ParamStore, config: PipelineConfig,
                     layers: Optional[int] = None, prefix: str = "backbone",
                     neighbors: Optional[np.ndarray] = None) -> FeatureMatrix:
    """局部嵌入后依次在 xy / xz / yz 平面做 layers 轮 plane_mix

    neighbors 可传入按原始点序计算好的 KNN 下标（缓存用）。
    """
    layers = config.layers if layers is None else layers
    if layers < 0:
        raise ConfigError(f"层数不能为负: {layers}")

    order = canonical_order(cloud)
    inverse = np.empty_like(order)
    inverse[order] = np.arange(len(order))
    ordered = cloud.select(order)
    if neighbors is not None:
        neighbors = inverse[neighbors[order]]

    features = local_embed(ordered, store, config.knn, prefix, neighbors)
    planes = plane_specs(ordered.coords, config.grid_rho, config.max_grid_cells)
    for layer in range(layers):
        plane = planes[PLANE_CYCLE[layer % len(PLANE_CYCLE)]]
        features = plane_mix(features, plane, store[f"{prefix}/mix{layer}/kernel"],
                             store[f"{prefix}/mix{layer}/bias"])

    return FeatureMatrix(tk.index_rows(features.features, inverse), cloud.coords)
