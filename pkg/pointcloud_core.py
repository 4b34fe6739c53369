#!/usr/bin/env python3
"""
点云容器、刚体变换、多帧堆叠与体素下采样

点数组统一为 (N, 5) 的 float64 数组，列为 x, y, z, intensity, range。
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ConfigError, DataError

logger = logging.getLogger(__name__)

X, Y, Z, INTENSITY, RANGE = range(5)
POINT_DIM = 5

_ORTHO_TOL = 1e-6


def make_points(xyz: np.ndarray, intensity: Optional[np.ndarray] = None) -> np.ndarray:
    """由坐标和反射强度构造 Point5 数组，range 由坐标计算"""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    if intensity is None:
        intensity = np.zeros(len(xyz))
    points = np.empty((len(xyz), POINT_DIM), dtype=np.float64)
    points[:, :3] = xyz
    points[:, INTENSITY] = np.asarray(intensity, dtype=np.float64).reshape(-1)
    points[:, RANGE] = np.linalg.norm(xyz, axis=1)
    return points


def check_points(points: np.ndarray) -> np.ndarray:
    """校验点数组形状与数值有限性"""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != POINT_DIM:
        raise DataError(f"点数组形状应为 (N, {POINT_DIM})，实际为 {points.shape}")
    if not np.isfinite(points).all():
        bad = int(np.flatnonzero(~np.isfinite(points).all(axis=1))[0])
        raise DataError(f"点坐标包含非有限值，首个位置: {bad}")
    return points


@dataclass(frozen=True)
class Pose:
    """4x4 齐次刚体变换"""

    matrix: np.ndarray

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=np.float64)
        if matrix.shape != (4, 4):
            raise DataError(f"位姿矩阵应为 4x4，实际为 {matrix.shape}")
        if not np.isfinite(matrix).all():
            raise DataError("位姿矩阵包含非有限值")
        rotation = matrix[:3, :3]
        if np.abs(rotation @ rotation.T - np.eye(3)).max() > _ORTHO_TOL:
            raise DataError("位姿旋转块不是正交矩阵")
        if abs(np.linalg.det(rotation) - 1.0) > _ORTHO_TOL:
            raise DataError("位姿旋转块行列式不为 +1")
        if np.abs(matrix[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > 0:
            raise DataError("位姿最后一行必须为 (0, 0, 0, 1)")
        object.__setattr__(self, "matrix", matrix)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(4))

    @classmethod
    def from_rt(cls, rotation: np.ndarray, translation: Sequence[float]) -> "Pose":
        matrix = np.eye(4)
        matrix[:3, :3] = rotation
        matrix[:3, 3] = translation
        return cls(matrix)

    @classmethod
    def from_translation(cls, translation: Sequence[float]) -> "Pose":
        return cls.from_rt(np.eye(3), translation)

    @classmethod
    def from_yaw(cls, yaw: float, translation: Sequence[float] = (0.0, 0.0, 0.0)) -> "Pose":
        """绕 z 轴旋转 yaw 弧度再平移"""
        c, s = np.cos(yaw), np.sin(yaw)
        rotation = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls.from_rt(rotation, translation)

    @classmethod
    def from_kitti_row(cls, values: Sequence[float]) -> "Pose":
        """12 个浮点数，按行优先组成上三行"""
        values = np.asarray(values, dtype=np.float64)
        if values.size != 12:
            raise DataError(f"位姿行需要 12 个数，实际为 {values.size}")
        matrix = np.eye(4)
        matrix[:3, :] = values.reshape(3, 4)
        return cls(matrix)

    def to_kitti_row(self) -> np.ndarray:
        return self.matrix[:3, :].reshape(-1)

    def inverse(self) -> "Pose":
        rotation_t = self.rotation.T
        return Pose.from_rt(rotation_t, -rotation_t @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other：先作用 other 再作用 self"""
        return Pose(self.matrix @ other.matrix)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        """只变换坐标 (N, 3)"""
        return np.asarray(xyz, dtype=np.float64) @ self.rotation.T + self.translation


def relative_pose(world_poses: Sequence[Pose], src: int, dst: int) -> Pose:
    """把 src 帧坐标转换到 dst 帧坐标的变换 T^dst_src"""
    return world_poses[dst].inverse() @ world_poses[src]


def transform_points(points: np.ndarray, pose: Pose) -> np.ndarray:
    """刚体变换点云；强度保留，range 在新坐标系重新计算"""
    points = check_points(points)
    return make_points(pose.apply(points[:, :3]), points[:, INTENSITY])


@dataclass
class Scan:
    """单帧扫描"""

    frame_index: int
    points: np.ndarray

    def __post_init__(self):
        if self.frame_index < 0:
            raise DataError(f"frame_index 不能为负: {self.frame_index}")
        self.points = check_points(self.points)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class StackedCloud:
    """堆叠到当前帧坐标系的多帧点云

    source_offset: 每个点的来源帧偏移（0 为当前帧）
    scan_index: 每个点在来源扫描中的序号
    """

    points: np.ndarray
    source_offset: np.ndarray
    scan_index: np.ndarray = None
    max_offset: int = 0

    def __post_init__(self):
        self.points = check_points(self.points)
        self.source_offset = np.asarray(self.source_offset, dtype=np.int64).reshape(-1)
        if self.scan_index is None:
            self.scan_index = np.arange(len(self.points), dtype=np.int64)
        self.scan_index = np.asarray(self.scan_index, dtype=np.int64).reshape(-1)
        if len(self.source_offset) != len(self.points) or len(self.scan_index) != len(self.points):
            raise DataError(
                f"source_offset/scan_index 长度 ({len(self.source_offset)}/{len(self.scan_index)}) "
                f"与点数 {len(self.points)} 不一致")
        if len(self.source_offset) and (self.source_offset.min() < 0 or self.source_offset.max() > self.max_offset):
            raise DataError(f"source_offset 超出 [0, {self.max_offset}]")

    @property
    def count(self) -> int:
        return len(self.points)

    @property
    def coords(self) -> np.ndarray:
        return self.points[:, :3]

    def __len__(self) -> int:
        return self.count

    def select(self, index: np.ndarray) -> "StackedCloud":
        index = np.asarray(index, dtype=np.int64)
        return StackedCloud(self.points[index], self.source_offset[index],
                            self.scan_index[index], self.max_offset)

    def current_mask(self) -> np.ndarray:
        return self.source_offset == 0


def stack_scans(scans: Sequence[Scan], poses: Sequence[Pose], t: int) -> StackedCloud:
    """把历史扫描变换到当前帧并拼接

    poses[i] 把 scans[i] 变换到第 t 帧坐标系；scans 按时间从旧到新排列，当前帧在最后。
    """
    if len(scans) != len(poses):
        raise ConfigError(f"scans 与 poses 数量不一致: {len(scans)} vs {len(poses)}")
    if not scans:
        raise ConfigError("至少需要一帧扫描")

    blocks, offsets, indices = [], [], []
    for scan, pose in zip(scans, poses):
        offset = t - scan.frame_index
        if offset < 0:
            raise ConfigError(f"扫描帧 {scan.frame_index} 晚于目标帧 {t}")
        blocks.append(transform_points(scan.points, pose))
        offsets.append(np.full(len(scan), offset, dtype=np.int64))
        indices.append(np.arange(len(scan), dtype=np.int64))

    offsets_all = np.concatenate(offsets)
    return StackedCloud(np.concatenate(blocks), offsets_all, np.concatenate(indices),
                        int(offsets_all.max()) if len(offsets_all) else 0)


def voxel_keys(coords: np.ndarray, cell: Union[float, Sequence[float]]) -> np.ndarray:
    """体素键：逐轴 floor(coord / cell)，有符号整数"""
    cell_arr = np.broadcast_to(np.asarray(cell, dtype=np.float64), (3,))
    if (cell_arr <= 0).any():
        raise ConfigError(f"体素尺寸必须为正: {tuple(cell_arr)}")
    return np.floor(np.asarray(coords, dtype=np.float64)[:, :3] / cell_arr).astype(np.int64)


def voxel_downsample_with_inverse(cloud: StackedCloud, cell: float) -> Tuple[StackedCloud, np.ndarray]:
    """每个体素只保留输入顺序中的第一个点

    返回下采样点云以及 inverse：输入点 → 其所在体素保留点在输出中的行号。
    """
    if cell <= 0:
        raise ConfigError(f"下采样体素尺寸必须 > 0: {cell}")
    if cloud.count == 0:
        return cloud, np.zeros(0, dtype=np.int64)

    keys = voxel_keys(cloud.coords, cell)
    _, first, voxel_of_point = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    voxel_of_point = voxel_of_point.reshape(-1)
    order = np.argsort(first, kind="stable")
    kept = first[order]
    row_of_voxel = np.empty(len(first), dtype=np.int64)
    row_of_voxel[order] = np.arange(len(first))

    logger.debug(f"体素下采样: {cloud.count} -> {len(kept)} 点 (cell={cell})")
    return cloud.select(kept), row_of_voxel[voxel_of_point]


def voxel_downsample(cloud: StackedCloud, cell: float) -> StackedCloud:
    """体素下采样"""
    return voxel_downsample_with_inverse(cloud, cell)[0]


def read_scan_bin(path: Union[str, Path], frame_index: int = 0) -> Scan:
    """读取 KITTI 扫描：小端 float32 的 (x, y, z, intensity) 四元组"""
    raw = Path(path).read_bytes()
    if len(raw) % 16 != 0:
        raise DataError(f"扫描文件 {path} 长度 {len(raw)} 不是 16 的倍数，截断于偏移 {len(raw) - len(raw) % 16}")
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    if not np.isfinite(data).all():
        bad = int(np.flatnonzero(~np.isfinite(data).all(axis=1))[0])
        raise DataError(f"扫描文件 {path} 在偏移 {bad * 16} 处包含非有限值")
    return Scan(frame_index, make_points(data[:, :3], data[:, 3]))


def write_scan_bin(path: Union[str, Path], points: np.ndarray) -> None:
    points = check_points(points)
    data = np.empty((len(points), 4), dtype="<f4")
    data[:, :3] = points[:, :3]
    data[:, 3] = points[:, INTENSITY]
    Path(path).write_bytes(data.tobytes())


def read_poses(path: Union[str, Path]) -> List[Pose]:
    """读取位姿文件：每行 12 个空白分隔的浮点数"""
    poses = []
    offset = 0
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(keepends=True), 1):
        stripped = line.strip()
        if stripped:
            try:
                values = [float(v) for v in stripped.split()]
            except ValueError:
                raise DataError(f"位姿文件 {path} 第 {line_no} 行 (偏移 {offset}) 无法解析") from None
            if len(values) != 12:
                raise DataError(f"位姿文件 {path} 第 {line_no} 行 (偏移 {offset}) 需要 12 个数，实际 {len(values)}")
            poses.append(Pose.from_kitti_row(values))
        offset += len(line.encode("utf-8"))
    return poses


def write_poses(path: Union[str, Path], poses: Sequence[Pose]) -> None:
    lines = [" ".join(f"{v:.17g}" for v in pose.to_kitti_row()) for pose in poses]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
