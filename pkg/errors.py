#!/usr/bin/env python3
"""
流水线异常类型及其退出码
"""


class PipelineError(RuntimeError):
    """所有流水线错误的基类"""

    exit_code = 1


class ConfigError(PipelineError):
    """配置错误"""

    exit_code = 1


class UsageError(PipelineError):
    """调用方式错误"""

    exit_code = 1


class DataError(PipelineError):
    """数据错误"""

    exit_code = 2


class ShapeError(DataError):
    """张量形状不匹配"""

    def __init__(self, message: str, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)


class VersionError(DataError):
    """检查点格式或版本不兼容"""


class NumericError(PipelineError):
    """出现 NaN/Inf"""

    exit_code = 3
