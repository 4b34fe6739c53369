#!/usr/bin/env python3
"""
多视角时序融合

上一帧增强特征经位姿变换到当前帧后，与当前特征一起依次在 x-y、x-z、y-z 平面上
做二维融合：两路各自网格平均、通道拼接、1x1 卷积，再反投影替换当前点特征。
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

import tensor_kernels as tk
from backbone_lite import PLANE_CYCLE, FeatureMatrix, PlaneSpec
from config import PipelineConfig
from errors import ConfigError, ShapeError
from pointcloud_core import Pose
from tensor_kernels import ParamStore, Tensor

logger = logging.getLogger(__name__)

VIEWS = {"multi": PLANE_CYCLE, "bev": ("xy",)}


@dataclass
class TemporalFeatureState:
    """上一帧的增强特征及其在上一帧坐标系下的坐标"""

    features: Optional[Tensor] = None
    coords: Optional[np.ndarray] = None
    valid: bool = False

    def __post_init__(self):
        if self.valid:
            if self.features is None or self.coords is None:
                raise ShapeError("有效的时序状态必须包含特征与坐标")
            if len(self.features) != len(self.coords):
                raise ShapeError("时序状态特征行数与坐标数不一致", self.features.shape, np.shape(self.coords))

    @classmethod
    def empty(cls) -> "TemporalFeatureState":
        return cls()


def init_mtf_params(store: ParamStore, dim: int, views: Sequence[str] = PLANE_CYCLE, prefix: str = "mtf") -> None:
    for name in views:
        store.create(f"{prefix}/{name}/kernel", (1, 1, 2 * dim, dim))
        store.create(f"{prefix}/{name}/bias", (dim,), init="zeros")


def fuse2d(history: FeatureMatrix, current: FeatureMatrix, plane: PlaneSpec,
           kernel: Tensor, bias: Optional[Tensor] = None) -> FeatureMatrix:
    """单平面融合；history 坐标须已在当前帧坐标系下，输出只在当前点所在格读取"""
    cells = plane.cell_index(current.coords)
    current_grid = tk.scatter_mean(current.features, cells, plane.shape)
    if history.count:
        history_grid = tk.scatter_mean(history.features, plane.cell_index(history.coords), plane.shape)
    else:
        history_grid = Tensor(np.zeros(plane.shape + (history.dim,), dtype=current.features.dtype))
    fused = tk.conv2d(tk.concat([history_grid, current_grid], axis=-1), kernel, bias)
    return current.with_features(tk.gather(fused, cells))


def mtf_forward(current: FeatureMatrix, state: TemporalFeatureState, pose: Pose, store: ParamStore,
                config: PipelineConfig, prefix: str = "mtf",
                views: Optional[Sequence[str]] = None) -> Tuple[FeatureMatrix, TemporalFeatureState]:
    """返回 H_t 与供下一帧使用的新状态

    pose 为 T^t_{t-1}。state 无效时使用全零历史网格。历史特征不参与本帧求导，
    除非调用方直接传入需要梯度的张量。
    """
    views = VIEWS[config.mtf_views] if views is None else tuple(views)
    for name in views:
        if f"{prefix}/{name}/kernel" not in store:
            raise ConfigError(f"缺少平面 {name} 的融合参数")

    if state.valid:
        history = FeatureMatrix(state.features, pose.apply(state.coords))
        if history.dim != current.dim:
            raise ShapeError("历史特征维度与当前特征不一致", history.features.shape, current.features.shape)
    else:
        logger.debug("时序状态为空，使用零历史")
        history = FeatureMatrix(Tensor(np.zeros((0, current.dim), dtype=current.features.dtype)), np.zeros((0, 3)))

    union = np.concatenate([current.coords, history.coords])
    fused = current
    for name in views:
        plane = PlaneSpec.from_bounds(name, union, config.grid_rho, config.max_grid_cells)
        fused = fuse2d(history, fused, plane, store[f"{prefix}/{name}/kernel"], store[f"{prefix}/{name}/bias"])

    next_state = TemporalFeatureState(tk.detach(fused.features), current.coords.copy(), True)
    return fused, next_state
