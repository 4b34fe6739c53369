#!/usr/bin/env python3
"""
预测头与自适应预测融合

点分支与簇分支各有语义、运动两个两层 MLP 头（互不共享权重）；
置信度 S = sigmoid(MLP(concat(H_t, H^c_t)))，最终输出 (1 - S)·P + S·P_c。
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np

import tensor_kernels as tk
from errors import DataError, ShapeError
from label_transfer import read_label_file, write_label_file
from tensor_kernels import ParamStore, Tensor

logger = logging.getLogger(__name__)

BRANCHES = ("point", "cluster")
TASKS = ("sem", "mov")


@dataclass
class Logits:
    """逐点语义 / 运动类别分数"""

    semantic: Tensor
    motion: Tensor
    branch: str = "point"

    def __post_init__(self):
        if len(self.semantic) != len(self.motion):
            raise ShapeError("语义与运动 logits 行数不一致", self.semantic.shape, self.motion.shape)

    def labels(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.semantic.data.argmax(axis=1), self.motion.data.argmax(axis=1)


@dataclass
class Confidence:
    """簇分支置信度，形状 (N, 1)，取值在 (0, 1)"""

    semantic: Tensor
    motion: Tensor


def init_head_params(store: ParamStore, dim: int, num_sem: int, num_mov: int, prefix: str = "head") -> None:
    for branch in BRANCHES:
        for task, classes in zip(TASKS, (num_sem, num_mov)):
            base = f"{prefix}/{branch}_{task}"
            store.create(f"{base}/w1", (dim, dim))
            store.create(f"{base}/b1", (dim,), init="zeros")
            store.create(f"{base}/w2", (dim, classes))
            store.create(f"{base}/b2", (classes,), init="zeros")


def init_fusion_params(store: ParamStore, dim: int, prefix: str = "apf") -> None:
    for task in TASKS:
        store.create(f"{prefix}/{task}/w1", (2 * dim, dim))
        store.create(f"{prefix}/{task}/b1", (dim,), init="zeros")
        store.create(f"{prefix}/{task}/w2", (dim, 1))
        store.create(f"{prefix}/{task}/b2", (1,), init="zeros")


def _mlp(x: Tensor, store: ParamStore, base: str) -> Tensor:
    hidden = tk.gelu(tk.linear(x, store[f"{base}/w1"], store[f"{base}/b1"]))
    return tk.linear(hidden, store[f"{base}/w2"], store[f"{base}/b2"])


def prediction_head(features: Tensor, store: ParamStore, name: str, prefix: str = "head") -> Tensor:
    """linear → GELU → linear；name 形如 point_sem、cluster_mov"""
    return _mlp(features, store, f"{prefix}/{name}")


def branch_logits(features: Tensor, store: ParamStore, branch: str, prefix: str = "head") -> Logits:
    return Logits(prediction_head(features, store, f"{branch}_sem", prefix),
                  prediction_head(features, store, f"{branch}_mov", prefix), branch)


def confidence(point_features: Tensor, cluster_features: Tensor, store: ParamStore,
               prefix: str = "apf") -> Confidence:
    """语义与运动各用一个独立 MLP 估计簇分支置信度"""
    if len(point_features) != len(cluster_features):
        raise DataError(f"点特征行数 {len(point_features)} 与簇特征行数 {len(cluster_features)} 不一致")
    joined = tk.concat([point_features, cluster_features], axis=-1)
    return Confidence(tk.sigmoid(_mlp(joined, store, f"{prefix}/sem")),
                      tk.sigmoid(_mlp(joined, store, f"{prefix}/mov")))


def apf_fuse(point: Tensor, cluster: Tensor, score: Tensor) -> Tensor:
    """(1 - S)·P + S·P_c，S 沿类别轴广播"""
    if point.shape != cluster.shape:
        raise ShapeError("两个分支的 logits 形状不一致", point.shape, cluster.shape)
    if score.shape != (len(point), 1):
        raise ShapeError("置信度形状应为 (N, 1)", score.shape, (len(point), 1))
    return tk.add(tk.mul(tk.sub(1.0, score), point), tk.mul(score, cluster))


def fuse_logits(point: Logits, cluster: Logits, scores: Confidence) -> Logits:
    return Logits(apf_fuse(point.semantic, cluster.semantic, scores.semantic),
                  apf_fuse(point.motion, cluster.motion, scores.motion), "fused")


def write_predictions(path: Union[str, Path], semantic: np.ndarray, motion: np.ndarray) -> None:
    """逐点 uint32：低 16 位语义类别，高 16 位运动类别"""
    write_label_file(path, semantic, motion)


def read_predictions(path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    return read_label_file(path)
