#!/usr/bin/env python3
"""
确定性合成 LiDAR 序列

场景由地面（road）、两侧建筑与植被、若干车辆 / 行人组成。每个物体在局部坐标系里有
一份固定的表面采样模型，逐帧按其速度平移、加噪声，再变换到传感器坐标系；遮挡通过
按方位角 / 俯仰角分桶、每桶保留最近点来模拟。位姿表示传感器到世界的变换。
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from config import Config, PipelineConfig
from errors import ConfigError, DataError
from label_transfer import read_label_file, write_label_file
from pointcloud_core import Pose, Scan, make_points, read_poses, read_scan_bin, write_poses, write_scan_bin
from utils import ensure_dir, frame_name

logger = logging.getLogger(__name__)

CLASS_ID = {name: i for i, name in enumerate(Config.SEMANTIC_CLASSES)}
STATIC, MOVING = 0, Config.MOVING_ID

_INTENSITY = {"road": 0.10, "building": 0.55, "vegetation": 0.30, "car": 0.75, "truck": 0.65, "person": 0.40}
_SURFACE_DENSITY = 12.0  # 每平方米的模型采样点数
_SENSOR_HEIGHT = 1.8
_MIN_RANGE = 1.0
_AZIMUTH_BIN = np.deg2rad(0.4)
_ELEVATION_BIN = np.deg2rad(0.8)


@dataclass
class SceneObject:
    """场景物体：box 或 ellipsoid，size 为 (长, 宽, 高)，center 为底面中心"""

    class_name: str
    size: Tuple[float, float, float]
    center: Tuple[float, float, float]
    velocity: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    shape: str = "box"
    instance: int = -1

    @property
    def class_id(self) -> int:
        return CLASS_ID[self.class_name]

    @property
    def moving(self) -> bool:
        return bool(np.any(np.asarray(self.velocity) != 0.0))

    def center_at(self, frame: int) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64) + frame * np.asarray(self.velocity, dtype=np.float64)


@dataclass
class SceneConfig:
    """合成场景配置"""

    seed: int = 0
    frames: int = 40
    points_per_frame: int = 2500
    noise_sigma: float = 0.02
    ego_speed: float = 0.5
    ego_yaw_amplitude: float = 0.03
    sensor_range: float = 30.0
    occlusion: bool = True
    extent: Tuple[float, float, float, float] = (-20.0, 60.0, -15.0, 15.0)  # x_min, x_max, y_min, y_max
    objects: List[SceneObject] = field(default_factory=list)

    @classmethod
    def from_pipeline(cls, config: PipelineConfig) -> "SceneConfig":
        x_max = config.ego_speed * max(config.frames - 1, 0) + 40.0
        scene = cls(seed=config.seed, frames=config.frames, points_per_frame=config.points_per_frame,
                    noise_sigma=config.noise_sigma, ego_speed=config.ego_speed,
                    sensor_range=config.sensor_range, occlusion=config.occlusion,
                    extent=(-20.0, x_max, -15.0, 15.0))
        scene.objects = scenario_objects(config.scenario, scene)
        return scene

    def validate(self) -> "SceneConfig":
        if self.frames < 1 or self.points_per_frame < 1:
            raise ConfigError("帧数与每帧点数必须 >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma 不能为负")
        x_min, x_max, y_min, y_max = self.extent
        foreground = set(Config.FOREGROUND_CLASSES)
        for obj in self.objects:
            if obj.class_name not in CLASS_ID:
                raise ConfigError(f"未知物体类别: {obj.class_name}")
            if obj.class_name not in foreground:
                continue
            if not np.isfinite(obj.velocity).all():
                raise ConfigError(f"物体 {obj.class_name} 的速度不是有限值")
            half = 0.5 * max(obj.size[0], obj.size[1])
            for frame in (0, self.frames - 1):
                cx, cy, _ = obj.center_at(frame)
                if cx - half < x_min or cx + half > x_max or cy - half < y_min or cy + half > y_max:
                    raise ConfigError(f"物体 {obj.class_name} 在第 {frame} 帧离开场景范围 {self.extent}")
        return self


def scenario_objects(scenario: str, scene: SceneConfig) -> List[SceneObject]:
    """按场景名构造物体清单；前景物体按出现顺序分配实例编号"""
    x_min, x_max, _, _ = scene.extent
    length = x_max - x_min
    mid = 0.5 * (x_min + x_max)
    objects = [
        SceneObject("road", (length, 14.0, 0.0), (mid, 0.0, 0.0), shape="plane"),
        SceneObject("building", (length, 1.0, 6.0), (mid, 12.5, 0.0)),
        SceneObject("building", (length, 1.0, 8.0), (mid, -12.5, 0.0)),
    ]
    for x in np.arange(x_min + 6.0, x_max - 6.0, 9.0):
        objects.append(SceneObject("vegetation", (2.5, 2.5, 3.0), (float(x), 9.0, 0.5), shape="ellipsoid"))
        objects.append(SceneObject("vegetation", (2.0, 2.0, 2.5), (float(x) + 4.5, -9.0, 0.5), shape="ellipsoid"))

    if scenario == "default":
        objects += [
            SceneObject("car", (4.2, 1.8, 1.3), (4.0, -3.0, 0.3), (0.6, 0.0, 0.0)),
            SceneObject("car", (4.4, 1.8, 1.4), (16.0, 5.2, 0.3)),
            SceneObject("truck", (9.0, 2.5, 3.2), (10.0, 2.0, 0.3), (0.4, 0.0, 0.0)),
            SceneObject("person", (0.6, 0.6, 1.6), (14.0, -6.0, 0.2), (0.05, 0.08, 0.0)),
            SceneObject("person", (0.6, 0.6, 1.7), (22.0, 6.3, 0.2)),
        ]
    elif scenario == "truncation":
        speed = scene.ego_speed
        objects += [
            SceneObject("truck", (12.0, 2.5, 3.4), (12.0, 4.5, 0.3), (speed, 0.0, 0.0)),
            SceneObject("car", (4.2, 1.8, 1.4), (12.0, 1.8, 0.3), (speed, 0.0, 0.0)),
            SceneObject("car", (4.2, 1.8, 1.3), (20.0, -3.0, 0.3)),
            SceneObject("person", (0.6, 0.6, 1.7), (8.0, -6.0, 0.2), (0.0, 0.06, 0.0)),
        ]
    elif scenario == "static":
        objects += [
            SceneObject("car", (4.2, 1.8, 1.3), (6.0, -3.0, 0.3)),
            SceneObject("truck", (9.0, 2.5, 3.2), (14.0, 3.0, 0.3)),
            SceneObject("person", (0.6, 0.6, 1.7), (10.0, -6.0, 0.2)),
        ]
    else:
        raise ConfigError(f"未知场景: {scenario}")

    foreground = set(Config.FOREGROUND_CLASSES)
    instance = 0
    for obj in objects:
        if obj.class_name in foreground:
            obj.instance = instance
            instance += 1
    return objects


def _box_surface(size: Sequence[float], rng: np.random.Generator) -> np.ndarray:
    """长方体除底面外五个面上的均匀采样，原点在底面中心"""
    lx, ly, lz = size
    faces = [  # (面积, 固定轴, 固定值, 两个自由轴)
        (lx * ly, 2, lz, (0, 1)),
        (lx * lz, 1, -ly / 2, (0, 2)), (lx * lz, 1, ly / 2, (0, 2)),
        (ly * lz, 0, -lx / 2, (1, 2)), (ly * lz, 0, lx / 2, (1, 2)),
    ]
    half = np.array([lx / 2, ly / 2, lz])
    low = np.array([-lx / 2, -ly / 2, 0.0])
    blocks = []
    for area, axis, value, free in faces:
        count = max(int(np.ceil(area * _SURFACE_DENSITY)), 1)
        pts = np.empty((count, 3))
        for a in free:
            pts[:, a] = rng.uniform(low[a], half[a], count)
        pts[:, axis] = value
        blocks.append(pts)
    return np.concatenate(blocks)


def _ellipsoid_surface(size: Sequence[float], rng: np.random.Generator) -> np.ndarray:
    radii = np.asarray(size) / 2.0
    area = 4.0 * np.pi * (np.prod(radii) ** (2.0 / 3.0))
    count = max(int(np.ceil(area * _SURFACE_DENSITY)), 1)
    directions = rng.normal(size=(count, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return directions * radii + np.array([0.0, 0.0, radii[2]])


def _plane_surface(size: Sequence[float], rng: np.random.Generator) -> np.ndarray:
    lx, ly, _ = size
    count = max(int(np.ceil(lx * ly * _SURFACE_DENSITY)), 1)
    return np.column_stack([rng.uniform(-lx / 2, lx / 2, count), rng.uniform(-ly / 2, ly / 2, count),
                            np.zeros(count)])


def surface_model(obj: SceneObject, seed: int, index: int) -> np.ndarray:
    """物体局部坐标系下固定的表面采样点"""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1000 + index]))
    if obj.shape == "box":
        return _box_surface(obj.size, rng)
    if obj.shape == "ellipsoid":
        return _ellipsoid_surface(obj.size, rng)
    if obj.shape == "plane":
        return _plane_surface(obj.size, rng)
    raise ConfigError(f"未知物体形状: {obj.shape}")


def ego_pose(scene: SceneConfig, frame: int) -> Pose:
    """传感器到世界：沿 x 匀速前进，叠加小幅偏航"""
    yaw = scene.ego_yaw_amplitude * np.sin(0.3 * frame)
    return Pose.from_yaw(yaw, (scene.ego_speed * frame, 0.0, _SENSOR_HEIGHT))


@dataclass
class LabeledFrame:
    """带真值标签的一帧"""

    scan: Scan
    semantic: Optional[np.ndarray]
    motion: Optional[np.ndarray]
    instance: Optional[np.ndarray]
    pose: Pose

    @property
    def frame_index(self) -> int:
        return self.scan.frame_index

    @property
    def points(self) -> np.ndarray:
        return self.scan.points

    def __len__(self) -> int:
        return len(self.scan)

    @property
    def has_labels(self) -> bool:
        return self.semantic is not None


def occlusion_filter(xyz: np.ndarray) -> np.ndarray:
    """每个 (方位角, 俯仰角) 桶只保留最近的点，返回保留点下标（升序）"""
    distance = np.linalg.norm(xyz, axis=1)
    azimuth = np.floor(np.arctan2(xyz[:, 1], xyz[:, 0]) / _AZIMUTH_BIN).astype(np.int64)
    elevation = np.floor(np.arctan2(xyz[:, 2], np.hypot(xyz[:, 0], xyz[:, 1])) / _ELEVATION_BIN).astype(np.int64)
    order = np.lexsort((np.arange(len(xyz)), distance, elevation, azimuth))
    bins = np.stack([azimuth[order], elevation[order]], axis=1)
    first = np.ones(len(order), dtype=bool)
    first[1:] = (bins[1:] != bins[:-1]).any(axis=1)
    return np.sort(order[first])


def generate_frame(scene: SceneConfig, models: Sequence[np.ndarray], frame: int) -> LabeledFrame:
    rng = np.random.default_rng(np.random.SeedSequence([scene.seed, frame]))
    pose = ego_pose(scene, frame)
    to_sensor = pose.inverse()

    xyz, semantic, motion, instance, intensity = [], [], [], [], []
    for obj, model in zip(scene.objects, models):
        world = model + obj.center_at(frame)
        if scene.noise_sigma > 0:
            world = world + rng.normal(scale=scene.noise_sigma, size=world.shape)
        xyz.append(to_sensor.apply(world))
        count = len(model)
        semantic.append(np.full(count, obj.class_id))
        motion.append(np.full(count, MOVING if obj.moving else STATIC))
        instance.append(np.full(count, obj.instance))
        intensity.append(np.clip(_INTENSITY[obj.class_name] + rng.uniform(-0.05, 0.05, count), 0.0, 1.0))

    xyz = np.concatenate(xyz)
    semantic, motion = np.concatenate(semantic), np.concatenate(motion)
    instance, intensity = np.concatenate(instance), np.concatenate(intensity)

    distance = np.linalg.norm(xyz, axis=1)
    keep = np.flatnonzero((distance >= _MIN_RANGE) & (distance <= scene.sensor_range))
    if scene.occlusion:
        keep = keep[occlusion_filter(xyz[keep])]
    if len(keep) > scene.points_per_frame:
        keep = np.sort(rng.choice(keep, scene.points_per_frame, replace=False))

    # 量化到 float32，保证写盘再读回完全一致
    coords = xyz[keep].astype(np.float32).astype(np.float64)
    values = intensity[keep].astype(np.float32).astype(np.float64)
    scan = Scan(frame, make_points(coords, values))
    return LabeledFrame(scan, semantic[keep].astype(np.int64), motion[keep].astype(np.int64),
                        instance[keep].astype(np.int64), pose)


def generate_sequence(scene: Union[SceneConfig, PipelineConfig]) -> List[LabeledFrame]:
    """生成整段序列；同一种子结果逐位一致"""
    if isinstance(scene, PipelineConfig):
        scene = SceneConfig.from_pipeline(scene)
    scene.validate()
    models = [surface_model(obj, scene.seed, i) for i, obj in enumerate(scene.objects)]
    frames = [generate_frame(scene, models, t) for t in range(scene.frames)]
    logger.info(f"合成序列: {len(frames)} 帧, 平均 {np.mean([len(f) for f in frames]):.0f} 点/帧, "
                f"{sum(o.instance >= 0 for o in scene.objects)} 个前景实例")
    return frames


def sequence_dir(root: Union[str, Path], sequence: str = "00") -> Path:
    return Path(root) / "sequences" / sequence


def write_dataset(frames: Sequence[LabeledFrame], root: Union[str, Path], sequence: str = "00") -> Path:
    """按 KITTI sequences 目录结构写出扫描、标签、实例与位姿"""
    base = sequence_dir(root, sequence)
    scan_dir = ensure_dir(base / Config.SCAN_DIR)
    label_dir = ensure_dir(base / Config.LABEL_DIR)
    instance_dir = ensure_dir(base / Config.INSTANCE_DIR)
    for frame in frames:
        stem = frame_name(frame.frame_index)
        write_scan_bin(scan_dir / f"{stem}{Config.SCAN_SUFFIX}", frame.points)
        if frame.has_labels:
            write_label_file(label_dir / f"{stem}{Config.LABEL_SUFFIX}", frame.semantic, frame.motion)
        if frame.instance is not None:
            write_instance_file(instance_dir / f"{stem}{Config.INSTANCE_SUFFIX}", frame.instance)
    write_poses(base / Config.POSES_FILE, [frame.pose for frame in frames])
    logger.info(f"数据集已写入: {base}")
    return base


def write_instance_file(path: Union[str, Path], instance: np.ndarray) -> None:
    Path(path).write_bytes(np.asarray(instance, dtype="<i4").tobytes())


def read_instance_file(path: Union[str, Path]) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % 4 != 0:
        raise DataError(f"实例文件 {path} 长度 {len(raw)} 不是 4 的倍数，截断于偏移 {len(raw) - len(raw) % 4}")
    return np.frombuffer(raw, dtype="<i4").astype(np.int64)


def read_dataset(root: Union[str, Path], sequence: str = "00") -> List[LabeledFrame]:
    """读取序列；标签与实例文件缺失时对应字段为 None"""
    base = sequence_dir(root, sequence)
    scan_files = sorted((base / Config.SCAN_DIR).glob(f"*{Config.SCAN_SUFFIX}"))
    if not scan_files:
        raise DataError(f"目录中没有扫描文件: {base / Config.SCAN_DIR}")
    poses = read_poses(base / Config.POSES_FILE)
    if len(poses) != len(scan_files):
        raise DataError(f"位姿数 {len(poses)} 与扫描数 {len(scan_files)} 不一致")

    frames = []
    for index, (scan_file, pose) in enumerate(zip(scan_files, poses)):
        if scan_file.stem != frame_name(index):
            raise DataError(f"扫描文件编号不连续: 期望 {frame_name(index)}，实际 {scan_file.name}")
        scan = read_scan_bin(scan_file, index)
        semantic = motion = instance = None
        label_file = base / Config.LABEL_DIR / f"{scan_file.stem}{Config.LABEL_SUFFIX}"
        if label_file.exists():
            semantic, motion = read_label_file(label_file)
        instance_file = base / Config.INSTANCE_DIR / f"{scan_file.stem}{Config.INSTANCE_SUFFIX}"
        if instance_file.exists():
            instance = read_instance_file(instance_file)
        for name, values in (("标签", semantic), ("实例", instance)):
            if values is not None and len(values) != len(scan):
                raise DataError(f"帧 {index} 的{name}数 {len(values)} 与点数 {len(scan)} 不一致")
        frames.append(LabeledFrame(scan, semantic, motion, instance, pose))
    return frames
