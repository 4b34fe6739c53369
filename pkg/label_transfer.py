#!/usr/bin/env python3
"""
历史预测标签迁移

两轮体素最大投票：先用小体素迁移非地面类别，再用大而扁的体素给仍未标注的点
补上 road-like 标签。
"""

import logging
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from config import Config, PipelineConfig
from errors import ConfigError, DataError, UsageError
from pointcloud_core import Pose, voxel_keys

logger = logging.getLogger(__name__)


class CoarseLabel(IntEnum):
    """粗类别"""

    UNLABELED = 0
    BACKGROUND = 1
    FOREGROUND = 2
    ROADLIKE = 3


# 票数相同时的优先级
TIE_PRIORITY = (CoarseLabel.FOREGROUND, CoarseLabel.BACKGROUND, CoarseLabel.ROADLIKE)


@dataclass(frozen=True)
class ClassMap:
    """细类别编号 → 粗类别"""

    mapping: Dict[int, CoarseLabel]

    @classmethod
    def from_names(cls, class_names: Sequence[str], roadlike: Iterable[str],
                   foreground: Iterable[str]) -> "ClassMap":
        roadlike, foreground = set(roadlike), set(foreground)
        unknown = (roadlike | foreground) - set(class_names)
        if unknown:
            raise ConfigError(f"类别映射引用了未知类别: {sorted(unknown)}")
        if roadlike & foreground:
            raise ConfigError(f"road-like 与 foreground 类别相交: {sorted(roadlike & foreground)}")

        mapping = {}
        for class_id, name in enumerate(class_names):
            if name in roadlike:
                mapping[class_id] = CoarseLabel.ROADLIKE
            elif name in foreground:
                mapping[class_id] = CoarseLabel.FOREGROUND
            else:
                mapping[class_id] = CoarseLabel.BACKGROUND
        return cls(mapping)

    @classmethod
    def from_config(cls, config: PipelineConfig) -> "ClassMap":
        return cls.from_names(Config.SEMANTIC_CLASSES, config.roadlike_classes, config.foreground_classes)

    def table(self) -> np.ndarray:
        """查找表，未映射的编号为 -1"""
        table = np.full(max(self.mapping) + 1 if self.mapping else 0, -1, dtype=np.int64)
        for class_id, coarse in self.mapping.items():
            table[class_id] = int(coarse)
        return table


def coarse_map(fine_labels: np.ndarray, class_map: ClassMap) -> np.ndarray:
    """逐点把细类别映射为粗类别"""
    fine_labels = np.asarray(fine_labels, dtype=np.int64).reshape(-1)
    if len(fine_labels) == 0:
        return np.zeros(0, dtype=np.int64)
    table = class_map.table()
    known = (fine_labels >= 0) & (fine_labels < len(table))
    coarse = np.full(len(fine_labels), -1, dtype=np.int64)
    coarse[known] = table[fine_labels[known]]
    if (coarse < 0).any():
        bad = int(fine_labels[np.flatnonzero(coarse < 0)[0]])
        raise DataError(f"类别映射中不存在类别编号 {bad}")
    return coarse


@dataclass
class VoteGrid:
    """稀疏体素投票表：keys (K, 3)，counts (K, 4) 按 CoarseLabel 列计数"""

    keys: np.ndarray
    counts: np.ndarray
    cell: Tuple[float, float, float]

    @classmethod
    def build(cls, coords: np.ndarray, labels: np.ndarray,
              cell: Tuple[float, float, float]) -> "VoteGrid":
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if len(labels) != len(coords):
            raise DataError(f"历史点数 {len(coords)} 与标签数 {len(labels)} 不一致")
        keys = voxel_keys(coords, cell)
        if len(keys) == 0:
            return cls(np.zeros((0, 3), dtype=np.int64), np.zeros((0, len(CoarseLabel)), dtype=np.int64), tuple(cell))
        unique_keys, inverse = np.unique(keys, axis=0, return_inverse=True)
        counts = np.zeros((len(unique_keys), len(CoarseLabel)), dtype=np.int64)
        np.add.at(counts, (inverse.reshape(-1), labels), 1)
        return cls(unique_keys, counts, tuple(cell))

    def __len__(self) -> int:
        return len(self.keys)

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """每个查询点所在体素在表中的行号，空体素为 -1"""
        query = voxel_keys(coords, self.cell)
        if len(self.keys) == 0 or len(query) == 0:
            return np.full(len(query), -1, dtype=np.int64)
        _, inverse = np.unique(np.concatenate([self.keys, query]), axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        row_of = np.full(int(inverse.max()) + 1, -1, dtype=np.int64)
        row_of[inverse[:len(self.keys)]] = np.arange(len(self.keys))
        return row_of[inverse[len(self.keys):]]

    def winners(self) -> np.ndarray:
        """每个体素的多数类，并列按 TIE_PRIORITY"""
        priority = [int(label) for label in TIE_PRIORITY]
        best = self.counts[:, priority].argmax(axis=1)
        return np.asarray(priority, dtype=np.int64)[best]


def _check_cell(cell: Sequence[float]) -> Tuple[float, float, float]:
    cell = tuple(float(c) for c in cell)
    if len(cell) != 3 or min(cell) <= 0:
        raise ConfigError(f"体素尺寸需要三个正数: {cell}")
    return cell


def _vote(current_coords: np.ndarray, history_coords: np.ndarray, history_labels: np.ndarray,
          cell: Tuple[float, float, float]) -> np.ndarray:
    grid = VoteGrid.build(history_coords, history_labels, cell)
    rows = grid.lookup(current_coords)
    labels = np.full(len(current_coords), int(CoarseLabel.UNLABELED), dtype=np.int64)
    hit = rows >= 0
    if hit.any():
        labels[hit] = grid.winners()[rows[hit]]
    return labels


def assign_nonground(current_coords: np.ndarray, history_coords: np.ndarray, history_labels: np.ndarray,
                     cell: Sequence[float] = (0.2, 0.2, 0.2)) -> np.ndarray:
    """第一轮：非地面历史点投票；落在空体素的当前点保持 Unlabeled"""
    cell = _check_cell(cell)
    history_labels = np.asarray(history_labels, dtype=np.int64).reshape(-1)
    keep = (history_labels != CoarseLabel.ROADLIKE) & (history_labels != CoarseLabel.UNLABELED)
    return _vote(current_coords, np.asarray(history_coords)[keep], history_labels[keep], cell)


def assign_ground(current_coords: np.ndarray, history_coords: np.ndarray, history_labels: np.ndarray,
                  cell: Sequence[float] = (10.0, 10.0, 0.2)) -> np.ndarray:
    """第二轮：只用 RoadLike 历史点，命中的点标为 RoadLike"""
    cell = _check_cell(cell)
    history_labels = np.asarray(history_labels, dtype=np.int64).reshape(-1)
    keep = history_labels == CoarseLabel.ROADLIKE
    return _vote(current_coords, np.asarray(history_coords)[keep], history_labels[keep], cell)


def transfer_labels(current_coords: np.ndarray,
                    history: Sequence[Tuple[np.ndarray, np.ndarray]],
                    poses: Sequence[Pose],
                    config: Optional[PipelineConfig] = None,
                    class_map: Optional[ClassMap] = None) -> np.ndarray:
    """把历史帧的细类别预测迁移到当前帧点上

    history 中每项为 (历史帧自身坐标系下的坐标, 细类别预测)，poses[i] 把第 i 项变换到当前帧。
    """
    if not history:
        raise UsageError("标签迁移至少需要一帧历史预测")
    if len(history) != len(poses):
        raise ConfigError(f"历史帧数 {len(history)} 与位姿数 {len(poses)} 不一致")
    config = config or PipelineConfig()
    class_map = class_map or ClassMap.from_config(config)
    current_coords = np.asarray(current_coords, dtype=np.float64)[:, :3]

    coords, labels = [], []
    for (frame_coords, predictions), pose in zip(history, poses):
        frame_coords = np.asarray(frame_coords, dtype=np.float64)[:, :3]
        if len(frame_coords) != len(np.asarray(predictions).reshape(-1)):
            raise DataError(f"历史帧点数 {len(frame_coords)} 与预测数 {np.asarray(predictions).size} 不一致")
        coords.append(pose.apply(frame_coords))
        labels.append(coarse_map(predictions, class_map))
    history_coords = np.concatenate(coords)
    history_labels = np.concatenate(labels)

    result = assign_nonground(current_coords, history_coords, history_labels, config.nonground_voxel)
    unlabeled = np.flatnonzero(result == CoarseLabel.UNLABELED)
    if len(unlabeled):
        result[unlabeled] = assign_ground(current_coords[unlabeled], history_coords, history_labels,
                                          config.ground_voxel)

    logger.debug("标签迁移: " + ", ".join(
        f"{label.name.lower()}={int((result == label).sum())}" for label in CoarseLabel))
    return result


def read_label_file(path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    """读取逐点 uint32 标签：低 16 位语义类别，高 16 位运动类别"""
    raw = Path(path).read_bytes()
    if len(raw) % 4 != 0:
        raise DataError(f"标签文件 {path} 长度 {len(raw)} 不是 4 的倍数，截断于偏移 {len(raw) - len(raw) % 4}")
    values = np.frombuffer(raw, dtype="<u4")
    return (values & 0xFFFF).astype(np.int64), (values >> 16).astype(np.int64)


def write_label_file(path: Union[str, Path], semantic: np.ndarray, motion: Optional[np.ndarray] = None) -> None:
    semantic = np.asarray(semantic, dtype=np.int64).reshape(-1)
    motion = np.zeros_like(semantic) if motion is None else np.asarray(motion, dtype=np.int64).reshape(-1)
    if len(motion) != len(semantic):
        raise DataError(f"语义标签数 {len(semantic)} 与运动标签数 {len(motion)} 不一致")
    if semantic.min(initial=0) < 0 or semantic.max(initial=0) > 0xFFFF or motion.min(initial=0) < 0 or motion.max(initial=0) > 0xFFFF:
        raise DataError("标签取值超出 16 位范围")
    values = (semantic.astype("<u4") & 0xFFFF) | (motion.astype("<u4") << 16)
    Path(path).write_bytes(values.astype("<u4").tobytes())
