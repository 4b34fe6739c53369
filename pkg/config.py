#!/usr/bin/env python3
"""
4D 时空点云分割流水线配置文件
"""

import dataclasses
import logging
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from errors import ConfigError

logger = logging.getLogger(__name__)


class Config:
    """配置类"""

    # 服务配置
    SERVER_NAME = "cluster4d-seg"
    SERVER_VERSION = "1.0.0"

    # 合成数据的细粒度类别表 (C_sem = 6)
    SEMANTIC_CLASSES = ["road", "building", "vegetation", "car", "truck", "person"]

    # 运动类别 (C_mov = 2)
    MOTION_CLASSES = ["static", "moving"]
    MOVING_ID = 1

    # 默认粗类别映射：其余类别均为 background
    ROADLIKE_CLASSES = ["road"]
    FOREGROUND_CLASSES = ["car", "truck", "person"]

    # SemanticKITTI 参考映射（文档用途，learning map 名称 → 粗类别）
    SEMANTIC_KITTI_COARSE = {
        "road": "roadlike",
        "parking": "roadlike",
        "sidewalk": "roadlike",
        "other-ground": "roadlike",
        "car": "foreground",
        "bicycle": "foreground",
        "motorcycle": "foreground",
        "truck": "foreground",
        "other-vehicle": "foreground",
        "person": "foreground",
        "bicyclist": "foreground",
        "motorcyclist": "foreground",
        "building": "background",
        "fence": "background",
        "vegetation": "background",
        "trunk": "background",
        "terrain": "background",
        "pole": "background",
        "traffic-sign": "background",
    }

    # 数据集目录约定（仿 KITTI sequences 结构）
    SCAN_DIR = "velodyne"
    LABEL_DIR = "labels"
    INSTANCE_DIR = "instances"
    PREDICTION_DIR = "predictions"
    CLUSTER_DIR = "clusters"
    POSES_FILE = "poses.txt"
    SCAN_SUFFIX = ".bin"
    LABEL_SUFFIX = ".label"
    INSTANCE_SUFFIX = ".inst"

    # 距离通道归一化尺度（米）
    RANGE_SCALE = 50.0

    # 性能阈值
    MAX_STAGE_SECONDS = 5.0
    MAX_MEMORY_MB = 4096.0

    # 日志配置
    LOG_LEVEL = "INFO"
    LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


@dataclass
class PipelineConfig:
    """流水线全部超参数，每个字段都有默认值"""

    # 随机种子与线程
    seed: int = 0
    threads: int = 1

    # 合成场景
    frames: int = 40
    points_per_frame: int = 2500
    noise_sigma: float = 0.02
    scenario: str = "default"
    ego_speed: float = 0.5
    sensor_range: float = 30.0
    occlusion: bool = True
    sequence: str = "00"

    # 多帧堆叠与下采样
    history_frames: int = 2
    temporal_stride: int = 1
    downsample_cell: float = 0.10

    # 标签迁移
    nonground_voxel: Tuple[float, float, float] = (0.2, 0.2, 0.2)
    ground_voxel: Tuple[float, float, float] = (10.0, 10.0, 0.2)
    label_history: int = 1
    roadlike_classes: Tuple[str, ...] = ("road",)
    foreground_classes: Tuple[str, ...] = ("car", "truck", "person")

    # 聚类
    dbscan_eps: float = 0.7
    dbscan_min_pts: int = 10

    # 网络
    dim: int = 32
    layers: int = 6
    knn: int = 8
    grid_rho: float = 1.0
    max_grid_cells: int = 128
    groups: int = 4
    cluster_knn: int = 4
    mtf_views: str = "multi"
    use_history_clusters: bool = True
    precision: str = "float64"

    # 训练
    lr: float = 0.002
    weight_decay: float = 0.003
    warmup_steps: int = 20
    stage1_epochs: int = 30
    stage2_epochs: int = 30
    val_fraction: float = 0.25
    augment: bool = False

    # 推理开关
    disable_cluster_branch: bool = False
    disable_mtf: bool = False
    oracle_history: bool = False

    @property
    def num_sem(self) -> int:
        return len(Config.SEMANTIC_CLASSES)

    @property
    def num_mov(self) -> int:
        return len(Config.MOTION_CLASSES)

    def validate(self) -> "PipelineConfig":
        """校验取值范围，失败抛出 ConfigError"""
        errors = []
        if self.frames < 1:
            errors.append("frames 必须 >= 1")
        if self.points_per_frame < 1:
            errors.append("points_per_frame 必须 >= 1")
        if self.noise_sigma < 0:
            errors.append("noise_sigma 不能为负")
        if self.scenario not in ("default", "truncation", "static"):
            errors.append(f"scenario 不支持: {self.scenario}")
        if self.history_frames < 0:
            errors.append("history_frames 不能为负")
        if self.temporal_stride < 1:
            errors.append("temporal_stride 必须 >= 1")
        if self.downsample_cell <= 0:
            errors.append("downsample_cell 必须 > 0")
        for name in ("nonground_voxel", "ground_voxel"):
            value = getattr(self, name)
            if len(value) != 3 or min(value) <= 0:
                errors.append(f"{name} 需要三个正数")
        if self.label_history < 1:
            errors.append("label_history 必须 >= 1")
        unknown = [c for c in self.roadlike_classes + self.foreground_classes
                   if c not in Config.SEMANTIC_CLASSES]
        if unknown:
            errors.append(f"roadlike_classes/foreground_classes 含未知类别: {unknown}")
        if set(self.roadlike_classes) & set(self.foreground_classes):
            errors.append("roadlike_classes 与 foreground_classes 不能相交")
        if self.dbscan_eps <= 0:
            errors.append("dbscan_eps 必须 > 0")
        if self.dbscan_min_pts < 1:
            errors.append("dbscan_min_pts 必须 >= 1")
        if self.dim < 1:
            errors.append("dim 必须 >= 1")
        if not 1 <= self.groups <= self.dim or self.dim % self.groups != 0:
            errors.append(f"groups={self.groups} 必须整除 dim={self.dim}")
        if self.layers < 0:
            errors.append("layers 不能为负")
        if self.knn < 1:
            errors.append("knn 必须 >= 1")
        if self.cluster_knn < 1:
            errors.append("cluster_knn 必须 >= 1")
        if self.grid_rho <= 0:
            errors.append("grid_rho 必须 > 0")
        if self.max_grid_cells < 1:
            errors.append("max_grid_cells 必须 >= 1")
        if self.mtf_views not in ("multi", "bev"):
            errors.append(f"mtf_views 不支持: {self.mtf_views}")
        if self.precision not in ("float64", "float32"):
            errors.append(f"precision 不支持: {self.precision}")
        if self.lr < 0 or self.weight_decay < 0:
            errors.append("lr 与 weight_decay 不能为负")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            errors.append("epochs 不能为负")
        if not 0.0 <= self.val_fraction < 1.0:
            errors.append("val_fraction 需在 [0, 1) 内")
        if self.threads < 1:
            errors.append("threads 必须 >= 1")
        if errors:
            raise ConfigError("; ".join(errors))
        return self

    def with_overrides(self, **overrides: Any) -> "PipelineConfig":
        """返回应用覆盖项后的新配置（忽略 None 值）"""
        names = {f.name for f in fields(self)}
        for key in overrides:
            if key not in names:
                raise ConfigError(f"未知配置项: {key}")
        clean = {k: v for k, v in overrides.items() if v is not None}
        return dataclasses.replace(self, **clean).validate()

    def as_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def _coerce(name: str, annotation: Any, raw: str) -> Any:
    """按字段注解把字符串转换成目标类型"""
    text = raw.strip()
    try:
        if annotation is bool or annotation == "bool":
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if annotation is int or annotation == "int":
            return int(text)
        if annotation is float or annotation == "float":
            return float(text)
        if annotation is str or annotation == "str":
            return text
        annotation_text = str(annotation)
        items = [item.strip() for item in text.split(",") if item.strip()]
        if "float" in annotation_text:
            return tuple(float(item) for item in items)
        return tuple(items)
    except ValueError:
        raise ConfigError(f"配置项 {name} 的取值无效: {raw!r}") from None


def parse_config_text(text: str, base: Optional[PipelineConfig] = None) -> PipelineConfig:
    """解析 key = value 文本"""
    config = base or PipelineConfig()
    annotations = {f.name: f.type for f in fields(PipelineConfig)}
    values: Dict[str, Any] = {}

    for line_no, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"第 {line_no} 行缺少 '=': {line.strip()}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in annotations:
            raise ConfigError(f"未知配置项: {key} (第 {line_no} 行)")
        values[key] = _coerce(key, annotations[key], raw)

    return dataclasses.replace(config, **values).validate()


def load_config(path: Optional[str] = None) -> PipelineConfig:
    """加载配置文件；path 为空时返回默认配置"""
    if path is None:
        return PipelineConfig().validate()
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"配置文件不存在: {path}")
    logger.debug(f"加载配置: {config_path}")
    return parse_config_text(config_path.read_text(encoding="utf-8"))


def dump_config(config: PipelineConfig) -> str:
    """序列化为 key = value 文本"""
    lines: List[str] = []
    for f in fields(config):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            text = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            text = "true" if value else "false"
        else:
            text = str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"
