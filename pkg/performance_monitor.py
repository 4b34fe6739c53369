#!/usr/bin/env python3
"""
性能监控模块
记录流水线各阶段耗时与进程内存占用，生成分阶段计时报告
"""

import functools
import logging
import threading
import time
from collections import defaultdict, deque
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Union

import numpy as np
import psutil

from config import Config
from utils import write_json

logger = logging.getLogger(__name__)

_MB = 1024.0 * 1024.0


def process_memory_mb() -> float:
    """当前进程常驻内存（MB）"""
    return psutil.Process().memory_info().rss / _MB


@dataclass
class StageMetric:
    """一次阶段执行的记录"""
    timestamp: datetime
    operation: str
    duration: float
    memory_mb: float
    items_processed: int
    success: bool
    error_message: Optional[str] = None


class PerformanceMonitor:
    """阶段计时与内存监控"""

    def __init__(self, max_history: int = 10000):
        self.history: deque = deque(maxlen=max_history)
        self.operation_stats: Dict[str, List[StageMetric]] = defaultdict(list)
        self.started_at = datetime.now()
        self.peak_memory_mb = process_memory_mb()
        self.max_seconds = Config.MAX_STAGE_SECONDS
        self.max_memory_mb = Config.MAX_MEMORY_MB
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._sampler: Optional[threading.Thread] = None

    @property
    def sampling(self) -> bool:
        return self._sampler is not None and self._sampler.is_alive()

    def start_monitoring(self, interval: float = 0.05):
        """启动后台内存采样线程，记录峰值常驻内存"""
        if self.sampling:
            return
        self._stop.clear()
        self._sampler = threading.Thread(target=self._sample_loop, args=(interval,), daemon=True)
        self._sampler.start()
        logger.debug(f"内存采样已启动，间隔 {interval * 1000:.0f} ms")

    def stop_monitoring(self):
        """停止后台采样"""
        self._stop.set()
        if self._sampler is not None:
            self._sampler.join(timeout=1.0)
            self._sampler = None
        logger.debug(f"内存采样已停止，峰值 {self.peak_memory_mb:.1f} MB")

    def _sample_loop(self, interval: float):
        while not self._stop.wait(interval):
            try:
                self._sample_memory()
            except psutil.Error as e:
                logger.error(f"内存采样出错: {e}")
                return

    def _sample_memory(self) -> float:
        memory = process_memory_mb()
        with self._lock:
            self.peak_memory_mb = max(self.peak_memory_mb, memory)
        return memory

    def record_operation(self, operation: str, duration: float,
                         items_processed: int = 0, success: bool = True,
                         error_message: Optional[str] = None):
        """追加一条阶段记录并检查阈值"""
        metric = StageMetric(datetime.now(), operation, duration, self._sample_memory(),
                             items_processed, success, error_message)
        with self._lock:
            self.history.append(metric)
            self.operation_stats[operation].append(metric)

        if not success:
            logger.error(f"阶段 {operation} 失败: {error_message}")
        elif duration > self.max_seconds:
            logger.warning(f"阶段 {operation} 耗时过长: {duration:.2f}秒")
        if metric.memory_mb > self.max_memory_mb:
            logger.warning(f"阶段 {operation} 内存占用过高: {metric.memory_mb:.1f}MB")

    @contextmanager
    def track(self, operation: str, items: int = 0) -> Iterator[Dict[str, float]]:
        """计时上下文；退出后 yield 出的字典里有 duration。异常照常抛出，但会记录为失败"""
        record: Dict[str, float] = {}
        start = time.perf_counter()
        try:
            yield record
        except Exception as e:
            self.record_operation(operation, time.perf_counter() - start, items, False, str(e))
            raise
        record["duration"] = time.perf_counter() - start
        self.record_operation(operation, record["duration"], items)

    def get_operation_stats(self, operation: Optional[str] = None) -> Dict[str, Any]:
        """某个阶段（缺省为全部）的耗时分布、成功率与吞吐"""
        with self._lock:
            metrics = list(self.operation_stats.get(operation, [])) if operation else list(self.history)
        if not metrics:
            return {"error": f"没有阶段 {operation or '*'} 的性能数据"}

        durations = np.array([m.duration for m in metrics])
        items = sum(m.items_processed for m in metrics)
        total = float(durations.sum())
        return {
            "count": len(metrics),
            "success_rate": float(np.mean([m.success for m in metrics])),
            "items": items,
            "items_per_second": items / total if total > 0 else None,
            "seconds": {
                "mean": float(durations.mean()),
                "p50": float(np.percentile(durations, 50)),
                "p95": float(np.percentile(durations, 95)),
                "max": float(durations.max()),
                "total": total,
            },
            "max_memory_mb": max(m.memory_mb for m in metrics),
        }

    def stage_breakdown(self) -> Dict[str, float]:
        """各阶段的平均耗时（秒）"""
        with self._lock:
            stats = {op: [m.duration for m in metrics] for op, metrics in self.operation_stats.items()}
        return {op: float(np.mean(durations)) for op, durations in stats.items() if durations}

    def get_performance_report(self) -> Dict[str, Any]:
        return {
            "report_time": datetime.now().isoformat(),
            "uptime_seconds": (datetime.now() - self.started_at).total_seconds(),
            "peak_memory_mb": self.peak_memory_mb,
            "stage_mean_seconds": self.stage_breakdown(),
            "stages": {op: self.get_operation_stats(op) for op in sorted(self.operation_stats)},
        }

    def export_metrics(self, filepath: Union[str, Path]):
        """把全部阶段记录与汇总报告写成 JSON"""
        with self._lock:
            records = [dict(asdict(m), timestamp=m.timestamp.isoformat()) for m in self.history]
        write_json(filepath, {"metrics": records, "report": self.get_performance_report()})
        logger.info(f"性能指标已导出到: {filepath}")

    def clear_metrics(self):
        with self._lock:
            self.history.clear()
            self.operation_stats.clear()
            self.peak_memory_mb = process_memory_mb()


# 全局性能监控器实例
performance_monitor = PerformanceMonitor()


def monitor_performance(operation_name: str):
    """为工具函数计时；结果为 dict 时读取其中的 success / error / frames"""
    def decorator(func):
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            start = time.perf_counter()
            try:
                result = func(*args, **kwargs)
            except Exception as e:
                performance_monitor.record_operation(operation_name, time.perf_counter() - start,
                                                     success=False, error_message=str(e))
                raise
            outcome = result if isinstance(result, dict) else {}
            performance_monitor.record_operation(
                operation_name, time.perf_counter() - start, int(outcome.get("frames", 0) or 0),
                bool(outcome.get("success", True)), outcome.get("error"))
            return result

        return wrapper
    return decorator
