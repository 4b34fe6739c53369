#!/usr/bin/env python3
"""
损失、优化器与评估指标

总损失 = 语义交叉熵 + 语义 Lovász-softmax + 运动交叉熵 + 运动 Lovász-softmax（等权）。
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

import tensor_kernels as tk
from config import Config, PipelineConfig
from errors import DataError, ShapeError
from tensor_kernels import ParamStore, Tensor
from utils import write_json

logger = logging.getLogger(__name__)

_ROW_SUM_TOL = 1e-6


def _check_targets(targets: np.ndarray, rows: int, num_classes: int,
                   ignore_id: Optional[int]) -> Tuple[np.ndarray, np.ndarray]:
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if len(targets) != rows:
        raise ShapeError("目标数与预测行数不一致", targets.shape, (rows,))
    valid = np.ones(rows, dtype=bool) if ignore_id is None else targets != ignore_id
    bad = valid & ((targets < 0) | (targets >= num_classes))
    if bad.any():
        raise DataError(f"目标类别 {int(targets[bad][0])} 超出范围 [0, {num_classes})")
    return targets, valid


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_id: Optional[int] = None) -> Tensor:
    """未被忽略的点上目标类别负对数 softmax 的均值"""
    targets, valid = _check_targets(targets, len(logits), logits.shape[1], ignore_id)
    count = int(valid.sum())
    if count == 0:
        raise DataError("所有点都被忽略，交叉熵无定义")

    rows = np.flatnonzero(valid)
    x = logits.data[rows]
    shifted = x - x.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    loss = float((log_norm - shifted[np.arange(count), targets[rows]]).mean())

    def backward(g):
        probs = np.exp(shifted - log_norm[:, None])
        probs[np.arange(count), targets[rows]] -= 1.0
        grad = np.zeros_like(logits.data)
        grad[rows] = probs * (g / count)
        return (grad,)

    return tk.record_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Jaccard 损失 Lovász 扩展在排序误差上的梯度"""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probs: Tensor, targets: np.ndarray, ignore_id: Optional[int] = None) -> Tensor:
    """目标中出现的各类 Lovász 项的平均"""
    targets, valid = _check_targets(targets, len(probs), probs.shape[1], ignore_id)
    rows = np.flatnonzero(valid)
    if len(rows) == 0:
        raise DataError("所有点都被忽略，Lovász 损失无定义")
    p = probs.data[rows]
    if np.abs(p.sum(axis=1) - 1.0).max() > _ROW_SUM_TOL:
        raise DataError("Lovász-softmax 的输入每行必须和为 1")
    t = targets[rows]

    present = np.unique(t)
    loss = 0.0
    grad_rows = np.zeros_like(p)
    for c in present:
        fg = (t == c).astype(np.float64)
        errors = np.abs(fg - p[:, c])
        order = np.argsort(-errors, kind="stable")
        weights = lovasz_grad(fg[order])
        loss += float(errors[order] @ weights)
        # d|fg - p| / dp = -1 (fg=1) 或 +1 (fg=0)
        grad_rows[order, c] = weights * np.where(fg[order] > 0, -1.0, 1.0)
    loss /= len(present)
    grad_rows /= len(present)

    def backward(g):
        grad = np.zeros_like(probs.data)
        grad[rows] = grad_rows * g
        return (grad,)

    return tk.record_op(np.asarray(loss, dtype=probs.dtype), (probs,), backward, "lovasz_softmax")


@dataclass
class LossReport:
    """四项损失及其和"""

    ce_sem: float
    ls_sem: float
    ce_mov: float
    ls_mov: float
    total: Tensor

    @property
    def value(self) -> float:
        return self.total.item()

    def as_dict(self) -> Dict[str, float]:
        return {"ce_sem": self.ce_sem, "ls_sem": self.ls_sem, "ce_mov": self.ce_mov,
                "ls_mov": self.ls_mov, "total": self.value}


def total_loss(sem_logits: Tensor, mov_logits: Tensor, sem_targets: np.ndarray, mov_targets: np.ndarray,
               ignore_id: Optional[int] = None) -> LossReport:
    terms = [
        cross_entropy(sem_logits, sem_targets, ignore_id),
        lovasz_softmax(tk.softmax(sem_logits, axis=1), sem_targets, ignore_id),
        cross_entropy(mov_logits, mov_targets, ignore_id),
        lovasz_softmax(tk.softmax(mov_logits, axis=1), mov_targets, ignore_id),
    ]
    total = tk.add(tk.add(terms[0], terms[1]), tk.add(terms[2], terms[3]))
    return LossReport(*(t.item() for t in terms), total)


def optimizer_step(store: ParamStore, grads: Dict[str, np.ndarray], lr: float, weight_decay: float,
                   betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> ParamStore:
    """AdamW 一步：一阶/二阶矩带偏差修正，权重衰减与梯度更新解耦

    矩保存在 store.state 的 adam.m/<name>、adam.v/<name>，步数在 store.meta["adam.step"]。
    """
    beta1, beta2 = betas
    step = int(store.meta.get("adam.step", 0)) + 1
    store.meta["adam.step"] = step
    correction1 = 1.0 - beta1 ** step
    correction2 = 1.0 - beta2 ** step

    for name, grad in grads.items():
        param = store[name]
        if grad.shape != param.shape:
            raise ShapeError(f"参数 {name} 的梯度形状不一致", grad.shape, param.shape)
        m = store.state.get(f"adam.m/{name}", np.zeros(param.shape))
        v = store.state.get(f"adam.v/{name}", np.zeros(param.shape))
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        store.state[f"adam.m/{name}"] = m
        store.state[f"adam.v/{name}"] = v
        update = (m / correction1) / (np.sqrt(v / correction2) + eps) + weight_decay * param.data
        param.data = (param.data - lr * update).astype(param.dtype)
    return store


class AdamW:
    """带线性预热的常数学习率 AdamW"""

    def __init__(self, store: ParamStore, lr: float, weight_decay: float = 0.003,
                 warmup_steps: int = 0, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.betas = betas
        self.eps = eps

    def learning_rate(self, step: int) -> float:
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        return self.lr

    def step(self, params: Iterable[Tuple[str, Tensor]]) -> float:
        grads = {name: (np.zeros(t.shape) if t.grad is None else t.grad) for name, t in params}
        lr = self.learning_rate(int(self.store.meta.get("adam.step", 0)))
        optimizer_step(self.store, grads, lr, self.weight_decay, self.betas, self.eps)
        return lr


class ConfusionMatrix:
    """C x C 计数，行为真值，列为预测"""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)

    @classmethod
    def from_labels(cls, predictions: np.ndarray, targets: np.ndarray, num_classes: int,
                    ignore_id: Optional[int] = None) -> "ConfusionMatrix":
        return cls(num_classes).add(predictions, targets, ignore_id)

    def add(self, predictions: np.ndarray, targets: np.ndarray, ignore_id: Optional[int] = None) -> "ConfusionMatrix":
        predictions = np.asarray(predictions, dtype=np.int64).reshape(-1)
        targets = np.asarray(targets, dtype=np.int64).reshape(-1)
        if len(predictions) != len(targets):
            raise DataError(f"预测数 {len(predictions)} 与真值数 {len(targets)} 不一致")
        if ignore_id is not None:
            keep = targets != ignore_id
            predictions, targets = predictions[keep], targets[keep]
        for name, values in (("预测", predictions), ("真值", targets)):
            if len(values) and (values.min() < 0 or values.max() >= self.num_classes):
                raise DataError(f"{name}类别超出范围 [0, {self.num_classes})")
        np.add.at(self.matrix, (targets, predictions), 1)
        return self

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.matrix)

    @property
    def fp(self) -> np.ndarray:
        return self.matrix.sum(axis=0) - self.tp

    @property
    def fn(self) -> np.ndarray:
        return self.matrix.sum(axis=1) - self.tp


@dataclass
class IoUResult:
    """逐类 IoU（被排除的类为 NaN）、mIoU 及运动类 IoU"""

    per_class: np.ndarray
    miou: float
    included: np.ndarray
    moving_iou: Optional[float] = None

    def as_dict(self, class_names: Optional[Sequence[str]] = None) -> Dict[str, object]:
        names = class_names or [str(i) for i in range(len(self.per_class))]
        return {
            "per_class": {name: (None if np.isnan(v) else float(v)) for name, v in zip(names, self.per_class)},
            "miou": self.miou,
            "iou_moving": self.moving_iou,
        }


def compute_iou(confusion: ConfusionMatrix, moving_id: Optional[int] = None) -> IoUResult:
    """IoU = TP / (TP + FP + FN)；分母为零的类不计入 mIoU"""
    if confusion.total == 0:
        raise DataError("混淆矩阵为空")
    denominator = confusion.tp + confusion.fp + confusion.fn
    included = denominator > 0
    per_class = np.full(confusion.num_classes, np.nan)
    per_class[included] = confusion.tp[included] / denominator[included]
    miou = float(per_class[included].mean())
    moving = None
    if moving_id is not None and included[moving_id]:
        moving = float(per_class[moving_id])
    return IoUResult(per_class, miou, included, moving)


def unanimous_instances(predictions: np.ndarray, instance_ids: np.ndarray) -> Tuple[int, int]:
    """(预测类别一致的实例数, 实例总数)"""
    predictions = np.asarray(predictions, dtype=np.int64).reshape(-1)
    instance_ids = np.asarray(instance_ids, dtype=np.int64).reshape(-1)
    if len(predictions) != len(instance_ids):
        raise DataError(f"预测数 {len(predictions)} 与实例编号数 {len(instance_ids)} 不一致")
    member = instance_ids >= 0
    if not member.any():
        return 0, 0
    pairs = np.unique(np.stack([instance_ids[member], predictions[member]], axis=1), axis=0)
    instances, classes_per_instance = np.unique(pairs[:, 0], return_counts=True)
    return int((classes_per_instance == 1).sum()), len(instances)


def consistency_metric(predictions: np.ndarray, instance_ids: np.ndarray) -> Optional[float]:
    """预测语义类别在成员点间完全一致的真值实例所占比例；没有实例时返回 None"""
    unanimous, total = unanimous_instances(predictions, instance_ids)
    return unanimous / total if total else None


def class_ids(names: Iterable[str]) -> List[int]:
    return [Config.SEMANTIC_CLASSES.index(name) for name in names]


def combined_labels(semantic: np.ndarray, motion: np.ndarray,
                    moving_classes: Sequence[int] = None) -> np.ndarray:
    """多帧评测类别：运动中的前景类映射为额外的 "(m)" 类"""
    semantic = np.asarray(semantic, dtype=np.int64).reshape(-1)
    motion = np.asarray(motion, dtype=np.int64).reshape(-1)
    if moving_classes is None:
        moving_classes = class_ids(Config.FOREGROUND_CLASSES)
    combined = semantic.copy()
    num_sem = len(Config.SEMANTIC_CLASSES)
    for offset, class_id in enumerate(moving_classes):
        combined[(semantic == class_id) & (motion == Config.MOVING_ID)] = num_sem + offset
    return combined


def combined_class_names(moving_classes: Sequence[int] = None) -> List[str]:
    if moving_classes is None:
        moving_classes = class_ids(Config.FOREGROUND_CLASSES)
    return list(Config.SEMANTIC_CLASSES) + [f"{Config.SEMANTIC_CLASSES[c]}(m)" for c in moving_classes]


@dataclass
class EvaluationAccumulator:
    """跨帧累计语义 / 运动 / 多帧类别的混淆矩阵与一致性"""

    num_sem: int = len(Config.SEMANTIC_CLASSES)
    num_mov: int = len(Config.MOTION_CLASSES)
    semantic: ConfusionMatrix = None
    motion: ConfusionMatrix = None
    multi_scan: ConfusionMatrix = None
    moving_classes: Optional[Sequence[int]] = None
    consistent: int = 0
    instances: int = 0

    def __post_init__(self):
        if self.moving_classes is None:
            self.moving_classes = class_ids(Config.FOREGROUND_CLASSES)
        self.semantic = ConfusionMatrix(self.num_sem)
        self.motion = ConfusionMatrix(self.num_mov)
        self.multi_scan = ConfusionMatrix(len(combined_class_names(self.moving_classes)))

    @classmethod
    def from_config(cls, config: PipelineConfig) -> "EvaluationAccumulator":
        """多帧评测的 (m) 类取配置中的前景类"""
        return cls(moving_classes=class_ids(config.foreground_classes))

    def add(self, pred_sem: np.ndarray, pred_mov: np.ndarray, gt_sem: np.ndarray, gt_mov: np.ndarray,
            instance_ids: Optional[np.ndarray] = None) -> None:
        self.semantic.add(pred_sem, gt_sem)
        self.motion.add(pred_mov, gt_mov)
        self.multi_scan.add(combined_labels(pred_sem, pred_mov, self.moving_classes),
                            combined_labels(gt_sem, gt_mov, self.moving_classes))
        if instance_ids is not None:
            unanimous, total = unanimous_instances(pred_sem, instance_ids)
            self.consistent += unanimous
            self.instances += total

    def report(self) -> Dict[str, object]:
        semantic = compute_iou(self.semantic)
        motion = compute_iou(self.motion, moving_id=Config.MOVING_ID)
        multi = compute_iou(self.multi_scan)
        return {
            "semantic": semantic.as_dict(Config.SEMANTIC_CLASSES),
            "motion": motion.as_dict(Config.MOTION_CLASSES),
            "multi_scan": multi.as_dict(combined_class_names(self.moving_classes)),
            "miou": semantic.miou,
            "iou_moving": motion.moving_iou,
            "consistency": (self.consistent / self.instances) if self.instances else None,
            "points": self.semantic.total,
        }


def format_report_text(report: Dict[str, object], title: str = "评估报告") -> str:
    """逐行文本报告"""
    def fmt(value) -> str:
        return "n/a" if value is None else f"{value:.4f}"

    lines = [f"== {title} ==", f"points: {report.get('points')}"]
    lines.append(f"mIoU: {fmt(report.get('miou'))}")
    lines.append(f"IoU_M: {fmt(report.get('iou_moving'))}")
    lines.append(f"consistency: {fmt(report.get('consistency'))}")
    for section in ("semantic", "motion", "multi_scan"):
        data = report.get(section)
        if not data:
            continue
        lines.append(f"[{section}] mIoU {fmt(data['miou'])}")
        for name, value in data["per_class"].items():
            lines.append(f"  {name:<14} {fmt(value)}")
    timings = report.get("timings")
    if timings:
        lines.append("[timings]")
        for stage, seconds in timings.items():
            lines.append(f"  {stage:<14} {seconds * 1000:.1f} ms")
    return "\n".join(lines) + "\n"


def write_report(report: Dict[str, object], text_path: Union[str, Path], json_path: Union[str, Path],
                 title: str = "评估报告") -> None:
    Path(text_path).write_text(format_report_text(report, title), encoding="utf-8")
    write_json(json_path, report)
