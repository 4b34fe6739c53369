#!/usr/bin/env python3
"""
流水线编排：逐帧准备（堆叠、下采样、标签迁移、聚类）、双分支模型、
闭环顺序推理以及两阶段训练
"""

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from backbone_lite import backbone_forward, init_backbone_params, knn_indices
from cluster_branch import ClusterFeatures, cluster_branch_forward, init_cluster_params
from cluster_gen import ClusterSet, generate_clusters
from config import PipelineConfig
from errors import DataError, NumericError
from fusion_heads import (Confidence, Logits, branch_logits, confidence, fuse_logits, init_fusion_params,
                          init_head_params)
from label_transfer import ClassMap, CoarseLabel, transfer_labels
from mtf import VIEWS, TemporalFeatureState, init_mtf_params, mtf_forward
from performance_monitor import PerformanceMonitor, performance_monitor
from pointcloud_core import Pose, StackedCloud, make_points, relative_pose, stack_scans, voxel_downsample_with_inverse
from synth_data import LabeledFrame
from tensor_kernels import ParamStore, Tape
from training_eval import AdamW, EvaluationAccumulator, total_loss
from utils import append_jsonl, read_jsonl, write_json

logger = logging.getLogger(__name__)

# 各训练阶段参与求导的参数前缀
STAGE_PREFIXES = {
    1: ("backbone/", "head/point_"),
    2: ("mtf/", "tce/", "apf/", "head/"),
}


def history_indices(t: int, config: PipelineConfig) -> List[int]:
    """参与堆叠的帧：t - N·s, ..., t - s, t 中非负的部分，旧帧在前"""
    stride = config.temporal_stride
    older = [t - j * stride for j in range(config.history_frames, 0, -1) if t - j * stride >= 0]
    return older + [t]


@dataclass
class PreparedFrame:
    """模型一帧的全部输入

    cloud 为下采样后的堆叠点云；inverse 把 stacked 的每一行映射到 cloud 的行。
    semantic / motion 为 cloud 各行的真值（无标签数据时为 None）。
    """

    frame_index: int
    world_pose: Pose
    stacked: StackedCloud
    cloud: StackedCloud
    inverse: np.ndarray
    neighbors: Optional[np.ndarray]
    coarse: np.ndarray
    clusters: ClusterSet
    semantic: Optional[np.ndarray] = None
    motion: Optional[np.ndarray] = None

    @property
    def has_targets(self) -> bool:
        return self.semantic is not None

    def current_rows(self) -> np.ndarray:
        """当前帧扫描中每个点（按原顺序）对应的 cloud 行号"""
        mask = self.stacked.current_mask()
        order = np.argsort(self.stacked.scan_index[mask], kind="stable")
        return self.inverse[mask][order]


def _rows_from_frames(cloud: StackedCloud, frames: Sequence[LabeledFrame], t: int, field: str) -> Optional[np.ndarray]:
    values = np.empty(cloud.count, dtype=np.int64)
    for offset in np.unique(cloud.source_offset):
        source = getattr(frames[t - int(offset)], field)
        if source is None:
            return None
        mask = cloud.source_offset == offset
        values[mask] = source[cloud.scan_index[mask]]
    return values


def prepare_frame(frames: Sequence[LabeledFrame], t: int, config: PipelineConfig,
                  predictions: Mapping[int, np.ndarray],
                  monitor: Optional[PerformanceMonitor] = None,
                  class_map: Optional[ClassMap] = None) -> PreparedFrame:
    """堆叠 → 下采样 → KNN；再用历史细类别预测做标签迁移并生成簇

    predictions 为 {帧号: 该帧扫描逐点细类别}，闭环推理时是模型自己的预测，
    oracle 模式或训练时是真值。
    """
    if not 0 <= t < len(frames):
        raise DataError(f"帧号 {t} 超出序列范围 [0, {len(frames)})")
    monitor = monitor or performance_monitor
    world = [frame.pose for frame in frames]
    indices = history_indices(t, config)

    with monitor.track("stack"):
        stacked = stack_scans([frames[i].scan for i in indices], [relative_pose(world, i, t) for i in indices], t)
        cloud, inverse = voxel_downsample_with_inverse(stacked, config.downsample_cell)
        neighbors = knn_indices(cloud.coords, min(config.knn, cloud.count)) if cloud.count else None

    with monitor.track("cluster_labels"):
        sources = [i for i in range(t - 1, t - 1 - config.label_history, -1) if i >= 0 and i in predictions]
        if sources:
            coarse = transfer_labels(cloud.coords, [(frames[i].points[:, :3], predictions[i]) for i in sources],
                                     [relative_pose(world, i, t) for i in sources], config, class_map)
        else:
            logger.debug(f"帧 {t} 没有历史预测，粗标签全部为 unlabeled")
            coarse = np.full(cloud.count, int(CoarseLabel.UNLABELED), dtype=np.int64)
        clusters = generate_clusters(cloud.coords, coarse, config.dbscan_eps, config.dbscan_min_pts, config.threads)

    logger.debug(f"帧 {t}: 堆叠 {stacked.count} 点, 下采样后 {cloud.count} 点, {clusters.num_clusters} 个簇")
    return PreparedFrame(t, frames[t].pose, stacked, cloud, inverse, neighbors, coarse, clusters,
                         _rows_from_frames(cloud, frames, t, "semantic"),
                         _rows_from_frames(cloud, frames, t, "motion"))


def augment_frame(prepared: PreparedFrame, rng: np.random.Generator) -> PreparedFrame:
    """随机绕 z 旋转、沿 y 翻转与整体缩放；KNN 需要重新计算"""
    yaw = rng.uniform(0.0, 2.0 * np.pi)
    flip = -1.0 if rng.random() < 0.5 else 1.0
    factor = rng.uniform(0.95, 1.05)
    c, s = np.cos(yaw), np.sin(yaw)
    rotation = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]) @ np.diag([1.0, flip, 1.0])

    cloud = prepared.cloud
    points = make_points(factor * cloud.coords @ rotation.T, cloud.points[:, 3])
    moved = StackedCloud(points, cloud.source_offset, cloud.scan_index, cloud.max_offset)
    return dataclasses.replace(prepared, cloud=moved, neighbors=None)


@dataclass
class FrameState:
    """跨帧携带的状态：MTF 历史特征、上一帧簇特征及其世界位姿"""

    mtf: TemporalFeatureState
    clusters: Optional[ClusterFeatures] = None
    world_pose: Optional[Pose] = None
    frame: int = -1

    @classmethod
    def empty(cls) -> "FrameState":
        return cls(TemporalFeatureState.empty())

    def pose_to(self, world_pose: Pose) -> Pose:
        """上一帧坐标 → 当前帧坐标"""
        if self.world_pose is None:
            return Pose.identity()
        return world_pose.inverse() @ self.world_pose


@dataclass
class ModelOutput:
    point: Logits
    fused: Logits
    cluster: Optional[Logits] = None
    confidence: Optional[Confidence] = None


class SegmentationModel:
    """点分支（骨干 + MTF）与簇分支（TCE）经 APF 融合的双分支模型"""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.store = ParamStore(config.seed, config.precision)
        init_backbone_params(self.store, config.dim, config.layers)
        init_mtf_params(self.store, config.dim, VIEWS[config.mtf_views])
        init_cluster_params(self.store, config.dim, config.groups)
        init_head_params(self.store, config.dim, config.num_sem, config.num_mov)
        init_fusion_params(self.store, config.dim)
        logger.debug(f"模型参数: {len(self.store)} 个张量, "
                     f"{sum(t.data.size for t in self.store.params.values())} 个标量")

    def forward(self, prepared: PreparedFrame, state: FrameState, use_mtf: Optional[bool] = None,
                use_cluster: Optional[bool] = None) -> Tuple[ModelOutput, FrameState]:
        config = self.config
        use_mtf = not config.disable_mtf if use_mtf is None else use_mtf
        use_cluster = not config.disable_cluster_branch if use_cluster is None else use_cluster

        features = backbone_forward(prepared.cloud, self.store, config, neighbors=prepared.neighbors)
        pose = state.pose_to(prepared.world_pose)
        mtf_state = TemporalFeatureState.empty()
        if use_mtf:
            features, mtf_state = mtf_forward(features, state.mtf, pose, self.store, config)

        point = branch_logits(features.features, self.store, "point")
        if not use_cluster:
            return ModelOutput(point, point), FrameState(mtf_state, None, prepared.world_pose, prepared.frame_index)

        cluster_feats, cluster_state = cluster_branch_forward(features, prepared.clusters, state.clusters, pose,
                                                              self.store, config, prepared.frame_index)
        cluster = branch_logits(cluster_feats, self.store, "cluster")
        scores = confidence(features.features, cluster_feats, self.store)
        output = ModelOutput(point, fuse_logits(point, cluster, scores), cluster, scores)
        return output, FrameState(mtf_state, cluster_state, prepared.world_pose, prepared.frame_index)

    def save(self, path: Union[str, Path]) -> None:
        self.store.save(path)

    def load(self, path: Union[str, Path]) -> "SegmentationModel":
        """参数集合或形状不符时抛出 VersionError"""
        self.store.load(path)
        return self


@dataclass
class FramePrediction:
    """一帧推理结果；semantic / motion 为当前扫描逐点预测"""

    frame_index: int
    semantic: np.ndarray
    motion: np.ndarray
    point_semantic: np.ndarray
    point_motion: np.ndarray
    prepared: PreparedFrame
    timings: Dict[str, float]


class SequenceRunner:
    """严格按时间顺序的闭环推理"""

    def __init__(self, model: SegmentationModel, config: Optional[PipelineConfig] = None,
                 monitor: Optional[PerformanceMonitor] = None):
        self.model = model
        self.config = config or model.config
        self.monitor = monitor or performance_monitor
        self.class_map = ClassMap.from_config(self.config)

    def run(self, frames: Sequence[LabeledFrame], indices: Optional[Sequence[int]] = None,
            oracle: Optional[bool] = None, use_mtf: Optional[bool] = None,
            use_cluster: Optional[bool] = None) -> List[FramePrediction]:
        """indices 须升序；第一帧走无历史的退化路径"""
        config = self.config
        oracle = config.oracle_history if oracle is None else oracle
        indices = list(range(len(frames))) if indices is None else list(indices)
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise DataError("推理帧号必须严格递增")
        if oracle and not all(frames[i].has_labels for i in indices):
            raise DataError("oracle 模式需要真值标签")

        state = FrameState.empty()
        history: Dict[int, np.ndarray] = {}
        results = []
        for t in indices:
            if oracle:
                history = {i: frames[i].semantic for i in range(max(t - config.label_history, 0), t)}
            prepared = prepare_frame(frames, t, config, history, self.monitor, self.class_map)
            with self.monitor.track("network", prepared.cloud.count) as network:
                output, state = self.model.forward(prepared, state, use_mtf, use_cluster)

            rows = prepared.current_rows()
            fused_sem, fused_mov = output.fused.labels()
            point_sem, point_mov = output.point.labels()
            timings = {"stack": self.monitor.operation_stats["stack"][-1].duration,
                       "cluster_labels": self.monitor.operation_stats["cluster_labels"][-1].duration,
                       "network": network["duration"]}
            results.append(FramePrediction(t, fused_sem[rows], fused_mov[rows], point_sem[rows], point_mov[rows],
                                           prepared, timings))
            if not oracle:
                history[t] = fused_sem[rows]
                for old in [i for i in history if i <= t - config.label_history]:
                    del history[old]
            logger.debug(f"帧 {t}: " + ", ".join(f"{k} {v * 1000:.1f}ms" for k, v in timings.items()))
        return results


def evaluate_predictions(results: Sequence[FramePrediction], frames: Sequence[LabeledFrame],
                         use_point_branch: bool = False,
                         config: Optional[PipelineConfig] = None) -> Dict[str, object]:
    accumulator = EvaluationAccumulator.from_config(config) if config else EvaluationAccumulator()
    for result in results:
        frame = frames[result.frame_index]
        if not frame.has_labels:
            raise DataError(f"帧 {result.frame_index} 没有真值标签")
        sem = result.point_semantic if use_point_branch else result.semantic
        mov = result.point_motion if use_point_branch else result.motion
        accumulator.add(sem, mov, frame.semantic, frame.motion, frame.instance)
    return accumulator.report()


def split_frames(count: int, val_fraction: float) -> Tuple[List[int], List[int]]:
    """按时间切分：前段训练，末段验证"""
    n_val = int(round(count * val_fraction))
    if count - n_val < 1:
        n_val = count - 1
    return list(range(count - n_val)), list(range(count - n_val, count))


class Trainer:
    """两阶段训练

    阶段一只训练骨干与点分支头；阶段二冻结骨干，训练 MTF、TCE、APF 与全部预测头。
    每个 epoch 结束写检查点并追加一条 metrics.jsonl 记录，可从检查点续训。
    """

    def __init__(self, model: SegmentationModel, frames: Sequence[LabeledFrame], out_dir: Union[str, Path],
                 checkpoint: Optional[Union[str, Path]] = None, monitor: Optional[PerformanceMonitor] = None):
        if not all(frame.has_labels for frame in frames):
            raise DataError("训练数据缺少标签")
        self.model = model
        self.config = model.config
        self.frames = frames
        self.out_dir = Path(out_dir)
        self.checkpoint = Path(checkpoint) if checkpoint else self.out_dir / "model.c4ds"
        self.metrics_path = self.out_dir / "metrics.jsonl"
        self.monitor = monitor or performance_monitor
        self.train_indices, self.val_indices = split_frames(len(frames), self.config.val_fraction)
        self._cache: Dict[int, PreparedFrame] = {}

    def _prepared(self, t: int) -> PreparedFrame:
        # 训练时标签迁移使用真值历史，准备结果与参数无关，可缓存
        if t not in self._cache:
            history = {i: self.frames[i].semantic for i in range(max(t - self.config.label_history, 0), t)}
            self._cache[t] = prepare_frame(self.frames, t, self.config, history, self.monitor)
        return self._cache[t]

    def _stage_epochs(self, stage: int) -> int:
        return self.config.stage1_epochs if stage == 1 else self.config.stage2_epochs

    def _stage_flags(self, stage: int) -> Tuple[bool, bool]:
        if stage == 1:
            return False, False
        return not self.config.disable_mtf, not self.config.disable_cluster_branch

    def _resume_point(self) -> Tuple[int, int]:
        store = self.model.store
        self.model.load(self.checkpoint)
        stage, epoch = int(store.meta.get("train.stage", 1)), int(store.meta.get("train.epoch", 0))
        kept = [r for r in read_jsonl(self.metrics_path) if (r["stage"], r["epoch"]) <= (stage, epoch)] \
            if self.metrics_path.exists() else []
        self.metrics_path.unlink(missing_ok=True)
        for record in kept:
            append_jsonl(self.metrics_path, record)
        if epoch >= self._stage_epochs(stage):
            stage, epoch = stage + 1, 0
        logger.info(f"从检查点续训: 阶段 {stage}, 已完成 {epoch} 个 epoch")
        return stage, epoch

    def _dump_failure(self, stage: int, epoch: int, frame: int, error: Exception, losses: List[float]) -> Path:
        path = self.out_dir / "numeric_failure.json"
        write_json(path, {
            "stage": stage, "epoch": epoch, "frame": frame, "error": str(error),
            "recent_losses": losses[-10:],
            "param_norms": {name: float(np.linalg.norm(t.data)) for name, t in self.model.store.params.items()},
            "optimizer_step": self.model.store.meta.get("adam.step", 0),
        })
        return path

    def train_epoch(self, stage: int, epoch: int, optimizer: AdamW) -> float:
        store = self.model.store
        use_mtf, use_cluster = self._stage_flags(stage)
        trainable = store.select(STAGE_PREFIXES[stage])
        state = FrameState.empty()
        losses: List[float] = []
        for t in self.train_indices:
            prepared = self._prepared(t)
            if stage == 1 and self.config.augment:
                rng = np.random.default_rng(np.random.SeedSequence([self.config.seed, stage, epoch, t]))
                prepared = augment_frame(prepared, rng)
            try:
                with Tape() as tape:
                    output, state = self.model.forward(prepared, state, use_mtf, use_cluster)
                    report = total_loss(output.fused.semantic, output.fused.motion,
                                        prepared.semantic, prepared.motion)
                    tape.backward(report.total)
            except NumericError as e:
                path = self._dump_failure(stage, epoch, t, e, losses)
                logger.error(f"阶段 {stage} epoch {epoch} 帧 {t} 出现数值错误，诊断已写入 {path}")
                raise
            optimizer.step(trainable)
            store.zero_grad()
            losses.append(report.value)
        return float(np.mean(losses)) if losses else 0.0

    def validate(self, stage: int) -> Dict[str, object]:
        if not self.val_indices:
            return {}
        use_mtf, use_cluster = self._stage_flags(stage)
        runner = SequenceRunner(self.model, self.config, self.monitor)
        results = runner.run(self.frames, self.val_indices, oracle=False, use_mtf=use_mtf, use_cluster=use_cluster)
        return evaluate_predictions(results, self.frames, config=self.config)

    def fit(self, resume: bool = False) -> Dict[str, object]:
        store = self.model.store
        self.out_dir.mkdir(parents=True, exist_ok=True)
        stage, start_epoch = (1, 0)
        if resume and self.checkpoint.exists():
            stage, start_epoch = self._resume_point()
        elif self.metrics_path.exists():
            self.metrics_path.unlink()

        last: Dict[str, object] = {}
        while stage <= 2:
            epochs = self._stage_epochs(stage)
            store.set_trainable(STAGE_PREFIXES[stage])
            if start_epoch == 0 and stage == 2:
                # 阶段二使用新的优化器状态
                store.state = {k: v for k, v in store.state.items() if not k.startswith("adam.")}
                store.meta.pop("adam.step", None)
            optimizer = AdamW(store, self.config.lr, self.config.weight_decay, self.config.warmup_steps)
            logger.info(f"阶段 {stage}: {epochs} 个 epoch, 可训练参数 {len(store.select(STAGE_PREFIXES[stage]))} 个")

            for epoch in range(start_epoch, epochs):
                with self.monitor.track(f"train_stage{stage}", len(self.train_indices)):
                    loss = self.train_epoch(stage, epoch, optimizer)
                val = self.validate(stage)
                store.meta["train.stage"] = stage
                store.meta["train.epoch"] = epoch + 1
                self.model.save(self.checkpoint)
                record = {"stage": stage, "epoch": epoch + 1, "loss": loss,
                          "val_miou": val.get("miou"), "val_iou_moving": val.get("iou_moving"),
                          "val_consistency": val.get("consistency"),
                          "lr": optimizer.learning_rate(int(store.meta.get("adam.step", 0)))}
                append_jsonl(self.metrics_path, record)
                last = record
                logger.info(f"阶段 {stage} epoch {epoch + 1}/{epochs}: loss {loss:.4f}, "
                            f"val mIoU {record['val_miou'] if record['val_miou'] is not None else 'n/a'}")
            stage, start_epoch = stage + 1, 0

        store.set_trainable(())
        if not self.checkpoint.exists():
            self.model.save(self.checkpoint)
        return {"checkpoint": str(self.checkpoint), "metrics": str(self.metrics_path), "final": last,
                "backbone_checksum": store.checksum("backbone/")}
