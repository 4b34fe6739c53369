#!/usr/bin/env python3
"""
损失、优化器、评估指标测试
"""

import itertools

import numpy as np
import pytest

import tensor_kernels as tk
from config import PipelineConfig
from errors import DataError
from pipeline import FrameState, SegmentationModel, prepare_frame
from synth_data import generate_sequence
from tensor_kernels import ParamStore, Tape, Tensor, grad_check
from training_eval import (AdamW, ConfusionMatrix, EvaluationAccumulator, combined_class_names, combined_labels,
                           compute_iou, consistency_metric, cross_entropy, format_report_text, lovasz_softmax,
                           optimizer_step, total_loss, write_report)


def one_hot(labels, num_classes):
    return np.eye(num_classes)[labels]


def set_jaccard_loss(pred, target, num_classes):
    """目标中出现的类的 1 - IoU 平均"""
    losses = []
    for c in range(num_classes):
        if not (target == c).any():
            continue
        inter = ((pred == c) & (target == c)).sum()
        union = ((pred == c) | (target == c)).sum()
        losses.append(1.0 - inter / union)
    return float(np.mean(losses))


def test_cross_entropy_uniform_is_log_c():
    loss = cross_entropy(Tensor(np.zeros((5, 4))), np.array([0, 1, 2, 3, 0]))
    assert abs(loss.item() - np.log(4.0)) < 1e-12


def test_cross_entropy_confident_correct():
    logits = np.zeros((3, 4))
    targets = np.array([2, 0, 3])
    logits[np.arange(3), targets] = 50.0
    assert cross_entropy(Tensor(logits), targets).item() < 1e-6


def test_cross_entropy_matches_logsumexp():
    rng = np.random.default_rng(0)
    logits = rng.normal(scale=3.0, size=(20, 6))
    targets = rng.integers(0, 6, 20)
    targets[:4] = 255
    keep = targets != 255
    expected = np.mean(np.log(np.exp(logits[keep]).sum(axis=1)) - logits[keep, targets[keep]])
    assert abs(cross_entropy(Tensor(logits), targets, ignore_id=255).item() - expected) < 1e-10


def test_cross_entropy_all_ignored():
    with pytest.raises(DataError):
        cross_entropy(Tensor(np.zeros((2, 3))), np.array([7, 7]), ignore_id=7)
    with pytest.raises(DataError):
        cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


@pytest.mark.parametrize("count", range(1, 13))
def test_lovasz_equals_jaccard_at_vertices(count):
    rng = np.random.default_rng(count)
    targets = [rng.integers(0, 2, count) for _ in range(2)] + [np.zeros(count, dtype=np.int64)]
    for target in targets:
        for bits in itertools.product((0, 1), repeat=count):
            pred = np.asarray(bits)
            loss = lovasz_softmax(Tensor(one_hot(pred, 2)), target).item()
            assert abs(loss - set_jaccard_loss(pred, target, 2)) < 1e-12


def test_lovasz_perfect_prediction_is_zero():
    targets = np.array([0, 2, 1, 2])
    assert lovasz_softmax(Tensor(one_hot(targets, 3)), targets).item() == 0.0


def test_lovasz_rejects_unnormalized_rows():
    with pytest.raises(DataError):
        lovasz_softmax(Tensor(np.full((3, 2), 0.6)), np.array([0, 1, 0]))


@pytest.mark.parametrize("seed", range(5))
def test_lovasz_monotone_in_correct_probability(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(30, 4))
    targets = rng.integers(0, 4, 30)
    before = lovasz_softmax(tk.softmax(Tensor(logits), axis=1), targets).item()
    boosted = logits.copy()
    rows = rng.random(30) < 0.5
    boosted[np.flatnonzero(rows), targets[rows]] += 0.5
    after = lovasz_softmax(tk.softmax(Tensor(boosted), axis=1), targets).item()
    assert after <= before + 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    sem = Tensor(rng.normal(size=(12, 5)))
    mov = Tensor(rng.normal(size=(12, 2)))
    sem_t, mov_t = rng.integers(0, 5, 12), rng.integers(0, 2, 12)
    report = grad_check(lambda s, m: total_loss(s, m, sem_t, mov_t).total, [sem, mov], seed=seed)
    assert report.passed, report


def test_total_loss_is_sum_of_terms():
    rng = np.random.default_rng(1)
    sem, mov = Tensor(rng.normal(size=(8, 6))), Tensor(rng.normal(size=(8, 2)))
    sem_t, mov_t = rng.integers(0, 6, 8), rng.integers(0, 2, 8)
    report = total_loss(sem, mov, sem_t, mov_t)
    parts = report.as_dict()
    assert abs(parts["total"] - (parts["ce_sem"] + parts["ls_sem"] + parts["ce_mov"] + parts["ls_mov"])) < 1e-12


def test_adamw_converges_on_quadratic():
    store = ParamStore()
    x = store.create("x", (1,), init="zeros")
    optimizer = AdamW(store, lr=0.05, weight_decay=0.0)
    for _ in range(2000):
        with Tape() as tape:
            loss = tk.reduce_sum(tk.mul(tk.sub(x, 3.0), tk.sub(x, 3.0)))
        tape.backward(loss)
        optimizer.step(store.select(("x",)))
    assert abs(x.data[0] - 3.0) < 1e-6
    assert store.meta["adam.step"] == 2000


def test_zero_learning_rate_is_identity():
    store = ParamStore(seed=1)
    w = store.create("w", (3, 2))
    before = w.data.copy()
    optimizer_step(store, {"w": np.ones((3, 2))}, lr=0.0, weight_decay=0.1)
    np.testing.assert_array_equal(w.data, before)


def test_zero_gradient_without_decay_is_identity():
    store = ParamStore(seed=2)
    w = store.create("w", (4,))
    before = w.data.copy()
    optimizer_step(store, {"w": np.zeros(4)}, lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(w.data, before)


def test_weight_decay_is_decoupled():
    store = ParamStore()
    w = store.create("w", (1,), init="ones")
    optimizer_step(store, {"w": np.zeros(1)}, lr=0.1, weight_decay=0.5)
    np.testing.assert_allclose(w.data, [1.0 - 0.1 * 0.5])


def test_warmup_schedule():
    optimizer = AdamW(ParamStore(), lr=0.01, warmup_steps=4)
    np.testing.assert_allclose([optimizer.learning_rate(s) for s in range(6)],
                               [0.0025, 0.005, 0.0075, 0.01, 0.01, 0.01])


def test_iou_half():
    targets = np.array([1] * 75 + [0] * 125)
    predictions = np.array([1] * 50 + [0] * 25 + [1] * 25 + [0] * 100)
    result = compute_iou(ConfusionMatrix.from_labels(predictions, targets, 2), moving_id=1)
    assert result.moving_iou == 0.5
    assert result.per_class[0] == 100 / 150


def test_iou_perfect_and_excluded_classes():
    labels = np.array([0, 2, 2, 0])
    result = compute_iou(ConfusionMatrix.from_labels(labels, labels, 4))
    assert result.miou == 1.0
    assert np.isnan(result.per_class[1]) and np.isnan(result.per_class[3])
    assert result.as_dict(["a", "b", "c", "d"])["per_class"]["b"] is None
    with pytest.raises(DataError):
        compute_iou(ConfusionMatrix(3))


def test_iou_matches_set_arithmetic_and_relabeling():
    rng = np.random.default_rng(3)
    predictions, targets = rng.integers(0, 3, 100), rng.integers(0, 3, 100)
    result = compute_iou(ConfusionMatrix.from_labels(predictions, targets, 3))
    for c in range(3):
        inter = ((predictions == c) & (targets == c)).sum()
        union = ((predictions == c) | (targets == c)).sum()
        assert result.per_class[c] == pytest.approx(inter / union, abs=1e-12)
    relabel = np.array([2, 0, 1])
    permuted = compute_iou(ConfusionMatrix.from_labels(relabel[predictions], relabel[targets], 3))
    np.testing.assert_allclose(permuted.per_class[relabel], result.per_class)


def test_consistency_metric():
    instances = np.repeat([0, 1, 2, 3], 4)
    predictions = np.array([3] * 4 + [4] * 4 + [5] * 4 + [3, 3, 5, 5])
    assert consistency_metric(predictions, instances) == 0.75
    assert consistency_metric(predictions, np.full(16, -1)) is None


def test_combined_labels_add_moving_classes():
    semantic = np.array([0, 3, 3, 5])
    motion = np.array([1, 0, 1, 1])
    names = combined_class_names()
    combined = combined_labels(semantic, motion)
    assert [names[c] for c in combined] == ["road", "car", "car(m)", "person(m)"]


def test_accumulator_moving_classes_follow_config():
    config = PipelineConfig().with_overrides(foreground_classes=("car", "person"))
    acc = EvaluationAccumulator.from_config(config)
    semantic = np.array([3, 4, 5, 0])
    motion = np.array([1, 1, 1, 0])
    acc.add(semantic, motion, semantic, motion)
    per_class = acc.report()["multi_scan"]["per_class"]
    assert list(per_class)[-2:] == ["car(m)", "person(m)"]
    assert "truck(m)" not in per_class
    assert per_class["truck"] == 1.0 and per_class["car(m)"] == 1.0
    assert combined_class_names(acc.moving_classes) == list(per_class)


def test_accumulator_report(tmp_path):
    acc = EvaluationAccumulator()
    semantic = np.array([0, 1, 3, 3, 5])
    motion = np.array([0, 0, 1, 1, 0])
    instances = np.array([-1, -1, 0, 0, 1])
    acc.add(semantic, motion, semantic, motion, instances)
    report = acc.report()
    assert report["miou"] == 1.0 and report["iou_moving"] == 1.0 and report["consistency"] == 1.0
    assert report["points"] == 5
    assert set(report) == {"semantic", "motion", "multi_scan", "miou", "iou_moving", "consistency", "points"}
    text = format_report_text(report)
    assert "mIoU: 1.0000" in text and "car(m)" in text
    write_report(report, tmp_path / "report.txt", tmp_path / "report.json")
    assert (tmp_path / "report.json").exists()


@pytest.mark.parametrize("seed", range(20))
def test_composed_model_gradient(seed):
    config = PipelineConfig().with_overrides(seed=seed, frames=2, points_per_frame=110, dim=16, layers=3, groups=4,
                                             knn=6, dbscan_min_pts=3, history_frames=1)
    frames = generate_sequence(config)
    model = SegmentationModel(config)
    first = prepare_frame(frames, 0, config, {})
    second = prepare_frame(frames, 1, config, {0: frames[0].semantic})
    assert config.points_per_frame < len(second.cloud) <= 2 * config.points_per_frame
    _, state = model.forward(first, FrameState.empty())
    params = [t for _, t in model.store.params.items()]

    def loss(*_):
        output, _ = model.forward(second, state)
        return total_loss(output.fused.semantic, output.fused.motion, second.semantic, second.motion).total

    report = grad_check(loss, params, samples=2, seed=seed)
    assert report.passed, report
