#!/usr/bin/env python3
"""
流水线通用工具函数
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np

from config import Config

_LOGGING_READY = False


def setup_logging(level: str = Config.LOG_LEVEL) -> logging.Logger:
    """配置根日志器（只生效一次），返回服务日志器"""
    global _LOGGING_READY
    if not _LOGGING_READY:
        logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO),
                            format=Config.LOG_FORMAT)
        _LOGGING_READY = True
    else:
        logging.getLogger().setLevel(getattr(logging, level.upper(), logging.INFO))
    return logging.getLogger(Config.SERVER_NAME)


def format_duration(seconds: float) -> str:
    """格式化耗时"""
    if seconds < 1.0:
        return f"{seconds * 1000:.1f} ms"
    if seconds < 60.0:
        return f"{seconds:.2f} s"
    minutes, rest = divmod(seconds, 60.0)
    return f"{int(minutes)} min {rest:.1f} s"


def frame_name(index: int) -> str:
    """帧文件名主干，如 000042"""
    return f"{index:06d}"


def ensure_dir(path: Union[str, Path]) -> Path:
    """确保目录存在"""
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def file_checksum(path: Union[str, Path]) -> str:
    """计算文件 SHA256"""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def directory_checksum(directory: Union[str, Path]) -> str:
    """按相对路径排序后汇总目录下所有文件的校验和"""
    root = Path(directory)
    digest = hashlib.sha256()
    for file_path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(str(file_path.relative_to(root)).encode("utf-8"))
        digest.update(file_checksum(file_path).encode("ascii"))
    return digest.hexdigest()


def to_jsonable(value: Any) -> Any:
    """把 numpy 标量/数组转换为可 JSON 序列化的对象"""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def write_json(path: Union[str, Path], payload: Dict[str, Any]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(to_jsonable(payload), f, indent=2, ensure_ascii=False, sort_keys=True)


def append_jsonl(path: Union[str, Path], record: Dict[str, Any]) -> None:
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(to_jsonable(record), ensure_ascii=False, sort_keys=True) + "\n")


def read_jsonl(path: Union[str, Path]) -> List[Dict[str, Any]]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                records.append(json.loads(line))
    return records
