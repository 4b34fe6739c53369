#!/usr/bin/env python3
"""
命令行入口：synth / train / infer / eval / cluster-labels

退出码：0 成功，1 用法或配置错误，2 数据错误，3 数值错误。
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from cluster_gen import write_cluster_file
from config import Config, PipelineConfig, load_config
from errors import DataError, PipelineError, UsageError
from fusion_heads import read_predictions, write_predictions
from label_transfer import write_label_file
from performance_monitor import performance_monitor
from pipeline import SegmentationModel, SequenceRunner, Trainer
from pointcloud_core import write_scan_bin
from synth_data import generate_sequence, read_dataset, write_dataset
from training_eval import EvaluationAccumulator, format_report_text, write_report
from utils import directory_checksum, ensure_dir, format_duration, frame_name, setup_logging, write_json

logger = logging.getLogger(__name__)


def cmd_synth(config: PipelineConfig, out: str) -> Dict[str, Any]:
    """生成合成序列并写盘"""
    frames = generate_sequence(config)
    base = write_dataset(frames, out, config.sequence)
    counts = [len(frame) for frame in frames]
    moving = sum(int((frame.motion == Config.MOVING_ID).sum()) for frame in frames)
    summary = {
        "success": True,
        "path": str(base),
        "frames": len(frames),
        "points": int(sum(counts)),
        "points_per_frame": {"min": int(min(counts)), "max": int(max(counts))},
        "moving_points": moving,
        "checksum": directory_checksum(base),
    }
    logger.info(f"合成完成: {summary['frames']} 帧, {summary['points']} 点, 运动点 {moving}, 写入 {base}")
    return summary


def cmd_train(config: PipelineConfig, data: str, out: str, checkpoint: Optional[str] = None,
              resume: bool = False) -> Dict[str, Any]:
    """两阶段训练，写出检查点与 metrics.jsonl"""
    frames = read_dataset(data, config.sequence)
    model = SegmentationModel(config)
    summary = Trainer(model, frames, out, checkpoint).fit(resume=resume)
    summary["success"] = True
    summary["frames"] = len(frames)
    return summary


def _load_model(config: PipelineConfig, checkpoint: str) -> SegmentationModel:
    if not Path(checkpoint).exists():
        raise DataError(f"检查点不存在: {checkpoint}")
    return SegmentationModel(config).load(checkpoint)


def timing_report(results: Sequence[Any]) -> Dict[str, Any]:
    """逐阶段平均耗时（毫秒）与峰值内存"""
    stages = list(results[0].timings) if results else []
    mean_ms = {stage: 1000.0 * float(np.mean([r.timings[stage] for r in results])) for stage in stages}
    return {
        "frames": len(results),
        "mean_ms": mean_ms,
        "total_ms": {stage: 1000.0 * float(np.sum([r.timings[stage] for r in results])) for stage in stages},
        "peak_memory_mb": performance_monitor.peak_memory_mb,
    }


def cmd_infer(config: PipelineConfig, checkpoint: str, data: str, out: str) -> Dict[str, Any]:
    """闭环顺序推理，逐帧写预测文件与计时报告"""
    frames = read_dataset(data, config.sequence)
    model = _load_model(config, checkpoint)
    pred_dir = ensure_dir(Path(out) / Config.PREDICTION_DIR)

    performance_monitor.start_monitoring()
    try:
        results = SequenceRunner(model, config).run(frames)
    finally:
        performance_monitor.stop_monitoring()

    for result in results:
        write_predictions(pred_dir / f"{frame_name(result.frame_index)}{Config.LABEL_SUFFIX}",
                          result.semantic, result.motion)

    timing = timing_report(results)
    write_json(Path(out) / "timing.json", timing)
    lines = ["== 计时 =="] + [f"{stage:<16}{ms:9.1f} ms/帧" for stage, ms in timing["mean_ms"].items()]
    lines.append(f"峰值内存        {timing['peak_memory_mb']:.1f} MB")
    (Path(out) / "timing.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for line in lines:
        logger.info(line)

    return {"success": True, "frames": len(results), "predictions": str(pred_dir), "timing": timing}


def _evaluate_dir(frames, pred_dir: Path, config: PipelineConfig) -> Dict[str, Any]:
    accumulator = EvaluationAccumulator.from_config(config)
    for index, frame in enumerate(frames):
        path = pred_dir / f"{frame_name(index)}{Config.LABEL_SUFFIX}"
        if not path.exists():
            raise DataError(f"缺少预测文件: {path}")
        semantic, motion = read_predictions(path)
        if len(semantic) != len(frame):
            raise DataError(f"帧 {index} 预测数 {len(semantic)} 与点数 {len(frame)} 不一致")
        if not frame.has_labels:
            raise DataError(f"帧 {index} 没有真值标签")
        accumulator.add(semantic, motion, frame.semantic, frame.motion, frame.instance)
    return accumulator.report()


def _prediction_dir(path: str) -> Path:
    directory = Path(path)
    nested = directory / Config.PREDICTION_DIR
    return nested if nested.is_dir() else directory


def cmd_eval(config: PipelineConfig, data: str, pred: str, out: str,
             compare: Optional[str] = None) -> Dict[str, Any]:
    """计算 IoU / mIoU / IoU_M / 一致性；compare 给出第二组预测时并列对比"""
    frames = read_dataset(data, config.sequence)
    report = _evaluate_dir(frames, _prediction_dir(pred), config)
    out_dir = ensure_dir(out)

    if compare is None:
        write_report(report, out_dir / "report.txt", out_dir / "report.json")
        logger.info(f"mIoU {report['miou']}, IoU_M {report['iou_moving']}")
        return {"success": True, "report": report}

    baseline = _evaluate_dir(frames, _prediction_dir(compare), config)
    delta = {}
    for key in ("miou", "iou_moving", "consistency"):
        a, b = report.get(key), baseline.get(key)
        delta[key] = None if a is None or b is None else a - b
    combined = {"primary": report, "compare": baseline, "delta": delta}
    text = format_report_text(report, f"评估报告: {pred}") + format_report_text(baseline, f"评估报告: {compare}")
    text += "== 差值 (primary - compare) ==\n" + "".join(
        f"{key}: {'n/a' if value is None else f'{value:+.4f}'}\n" for key, value in delta.items())
    (out_dir / "report.txt").write_text(text, encoding="utf-8")
    write_json(out_dir / "report.json", combined)
    return {"success": True, "report": combined}


def cmd_cluster_labels(config: PipelineConfig, data: str, out: str,
                       checkpoint: Optional[str] = None) -> Dict[str, Any]:
    """导出每帧的下采样堆叠点、迁移后的粗标签与簇编号

    有检查点时使用模型闭环预测做标签迁移，否则使用真值历史。
    """
    frames = read_dataset(data, config.sequence)
    if checkpoint:
        runner = SequenceRunner(_load_model(config, checkpoint), config)
        results = runner.run(frames, oracle=False)
    else:
        model = SegmentationModel(config)
        results = SequenceRunner(model, config).run(frames, oracle=True, use_mtf=False, use_cluster=False)

    cluster_dir = ensure_dir(Path(out) / Config.CLUSTER_DIR)
    counts: List[int] = []
    for result in results:
        prepared = result.prepared
        stem = frame_name(result.frame_index)
        write_scan_bin(cluster_dir / f"{stem}{Config.SCAN_SUFFIX}", prepared.cloud.points)
        write_label_file(cluster_dir / f"{stem}.coarse", prepared.coarse)
        write_cluster_file(cluster_dir / f"{stem}.cluster", prepared.clusters.assignment)
        counts.append(prepared.clusters.num_clusters)
    logger.info(f"已导出 {len(results)} 帧的簇标签，平均 {np.mean(counts) if counts else 0:.1f} 个簇/帧")
    return {"success": True, "frames": len(results), "path": str(cluster_dir), "clusters_per_frame": counts}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value 配置文件")
    common.add_argument("--seed", type=int, help="随机种子")
    common.add_argument("--threads", type=int, help="聚类线程数")
    common.add_argument("--log-level", default=Config.LOG_LEVEL)

    switches = _Parser(add_help=False)
    switches.add_argument("--disable-cluster-branch", action="store_true", help="只用点分支")
    switches.add_argument("--disable-mtf", action="store_true", help="关闭多视角时序融合")
    switches.add_argument("--oracle-history", action="store_true", help="标签迁移使用真值历史")

    parser = _Parser(prog="cluster4d", description="4D 时空点云分割流水线")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    synth = sub.add_parser("synth", parents=[common], help="生成合成数据集")
    synth.add_argument("--out", default="data")

    train = sub.add_parser("train", parents=[common, switches], help="两阶段训练")
    train.add_argument("--data", default="data")
    train.add_argument("--out", default="runs")
    train.add_argument("--checkpoint")
    train.add_argument("--resume", action="store_true", help="从检查点续训")

    infer = sub.add_parser("infer", parents=[common, switches], help="顺序推理")
    infer.add_argument("--data", default="data")
    infer.add_argument("--out", default="runs")
    infer.add_argument("--checkpoint", required=True)

    evaluate = sub.add_parser("eval", parents=[common], help="评估预测")
    evaluate.add_argument("--data", default="data")
    evaluate.add_argument("--pred", required=True, help="预测目录")
    evaluate.add_argument("--out", default="runs")
    evaluate.add_argument("--compare", help="对比的第二组预测目录")

    clusters = sub.add_parser("cluster-labels", parents=[common, switches], help="导出标签迁移与聚类中间结果")
    clusters.add_argument("--data", default="data")
    clusters.add_argument("--out", default="runs")
    clusters.add_argument("--checkpoint")
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """配置文件为底，命令行参数覆盖"""
    config = load_config(args.config)
    overrides = {"seed": args.seed, "threads": args.threads}
    for name in ("disable_cluster_branch", "disable_mtf", "oracle_history"):
        if getattr(args, name, False):
            overrides[name] = True
    return config.with_overrides(**overrides)


def run(argv: Optional[Sequence[str]] = None) -> Dict[str, Any]:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    config = resolve_config(args)

    if args.command == "synth":
        return cmd_synth(config, args.out)
    if args.command == "train":
        if args.resume and not args.checkpoint and not (Path(args.out) / "model.c4ds").exists():
            raise UsageError("--resume 需要已有检查点")
        return cmd_train(config, args.data, args.out, args.checkpoint, args.resume)
    if args.command == "infer":
        return cmd_infer(config, args.checkpoint, args.data, args.out)
    if args.command == "eval":
        return cmd_eval(config, args.data, args.pred, args.out, args.compare)
    return cmd_cluster_labels(config, args.data, args.out, args.checkpoint)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        result = run(argv)
    except PipelineError as e:
        logging.getLogger(Config.SERVER_NAME).error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logging.getLogger(Config.SERVER_NAME).error(f"文件访问失败: {e}")
        return DataError.exit_code
    if "timing" in result:
        total = sum(result["timing"]["total_ms"].values()) / 1000.0
        logger.info(f"总耗时 {format_duration(total)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
