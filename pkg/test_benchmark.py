#!/usr/bin/env python3
"""
默认规模基准测试（慢，pytest -m slow 运行）
"""

import pytest

from config import PipelineConfig
from pipeline import SegmentationModel, SequenceRunner, Trainer, evaluate_predictions
from synth_data import generate_sequence

pytestmark = pytest.mark.slow


def train(config, out_dir):
    frames = generate_sequence(config)
    model = SegmentationModel(config)
    trainer = Trainer(model, frames, out_dir)
    return frames, model, trainer, trainer.fit()


def held_out_report(model, config, frames, val_indices, use_cluster):
    # 闭环推理走完整序列，只在验证段上打分
    results = SequenceRunner(model, config).run(frames, oracle=False, use_cluster=use_cluster)
    held_out = [r for r in results if r.frame_index in set(val_indices)]
    return evaluate_predictions(held_out, frames, config=config)


def test_default_benchmark_reaches_targets(tmp_path):
    config = PipelineConfig()
    assert config.frames == 40
    _, _, trainer, result = train(config, tmp_path)
    final = result["final"]
    assert (final["stage"], final["epoch"]) == (2, config.stage2_epochs)
    assert len(trainer.val_indices) > 0
    assert final["val_miou"] >= 0.85
    assert final["val_iou_moving"] >= 0.80


def test_cluster_branch_helps_on_truncated_truck(tmp_path):
    wins = []
    for seed in range(5):
        config = PipelineConfig().with_overrides(scenario="truncation", seed=seed)
        frames, model, trainer, _ = train(config, tmp_path / f"seed{seed}")
        full = held_out_report(model, config, frames, trainer.val_indices, use_cluster=True)
        point_only = held_out_report(model, config, frames, trainer.val_indices, use_cluster=False)
        gain = full["consistency"] - point_only["consistency"]
        wins.append(gain >= 0.05 and full["iou_moving"] >= point_only["iou_moving"])
    assert sum(wins) >= 4, wins
