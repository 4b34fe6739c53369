#!/usr/bin/env python3
"""
4D 时空点云分割 MCP 服务器
把合成、训练、推理、评估与簇标签导出暴露为 MCP 工具
"""

import asyncio
import json
from typing import Any, Callable, Dict, List, Optional

# MCP相关导入
from mcp.server.lowlevel import NotificationOptions, Server
from mcp.server.models import InitializationOptions
from mcp.server.stdio import stdio_server
from mcp.types import TextContent, Tool

from cli_app import cmd_cluster_labels, cmd_eval, cmd_infer, cmd_synth, cmd_train
from config import Config, PipelineConfig, load_config
from errors import PipelineError
from performance_monitor import monitor_performance
from utils import setup_logging, to_jsonable

logger = setup_logging()


def _config(arguments: Dict[str, Any]) -> PipelineConfig:
    """配置文件为底，再应用 overrides 对象里的字段"""
    config = load_config(arguments.get("config_path"))
    overrides: Optional[Dict[str, Any]] = arguments.get("overrides")
    if overrides:
        config = config.with_overrides(**{k: tuple(v) if isinstance(v, list) else v for k, v in overrides.items()})
    return config


def _guarded(func: Callable[[], Dict[str, Any]]) -> Dict[str, Any]:
    try:
        return func()
    except PipelineError as e:
        return {"success": False, "error": str(e), "error_type": type(e).__name__, "exit_code": e.exit_code}
    except OSError as e:
        return {"success": False, "error": f"文件访问失败: {e}", "exit_code": 2}


@monitor_performance("generate_dataset")
def generate_dataset_impl(arguments: Dict[str, Any]) -> Dict[str, Any]:
    return _guarded(lambda: cmd_synth(_config(arguments), arguments.get("out_dir", "data")))


@monitor_performance("train_model")
def train_model_impl(arguments: Dict[str, Any]) -> Dict[str, Any]:
    return _guarded(lambda: cmd_train(_config(arguments), arguments.get("data_dir", "data"),
                                      arguments.get("out_dir", "runs"), arguments.get("checkpoint"),
                                      bool(arguments.get("resume", False))))


@monitor_performance("run_inference")
def run_inference_impl(arguments: Dict[str, Any]) -> Dict[str, Any]:
    return _guarded(lambda: cmd_infer(_config(arguments), arguments["checkpoint"],
                                      arguments.get("data_dir", "data"), arguments.get("out_dir", "runs")))


@monitor_performance("evaluate_predictions")
def evaluate_predictions_impl(arguments: Dict[str, Any]) -> Dict[str, Any]:
    return _guarded(lambda: cmd_eval(_config(arguments), arguments.get("data_dir", "data"),
                                     arguments["pred_dir"], arguments.get("out_dir", "runs"),
                                     arguments.get("compare_dir")))


@monitor_performance("dump_cluster_labels")
def dump_cluster_labels_impl(arguments: Dict[str, Any]) -> Dict[str, Any]:
    return _guarded(lambda: cmd_cluster_labels(_config(arguments), arguments.get("data_dir", "data"),
                                               arguments.get("out_dir", "runs"), arguments.get("checkpoint")))


TOOL_HANDLERS: Dict[str, Callable[[Dict[str, Any]], Dict[str, Any]]] = {
    "generate_dataset": generate_dataset_impl,
    "train_model": train_model_impl,
    "run_inference": run_inference_impl,
    "evaluate_predictions": evaluate_predictions_impl,
    "dump_cluster_labels": dump_cluster_labels_impl,
}

_COMMON_PROPERTIES = {
    "config_path": {"type": "string", "description": "key = value config file"},
    "overrides": {"type": "object", "description": "Config fields to override, e.g. {\"seed\": 7}"},
}


def _schema(properties: Dict[str, Any], required: Optional[List[str]] = None) -> Dict[str, Any]:
    schema = {"type": "object", "properties": {**_COMMON_PROPERTIES, **properties}}
    if required:
        schema["required"] = required
    return schema


# 创建MCP服务器实例
server = Server(Config.SERVER_NAME)


@server.list_tools()
async def handle_list_tools() -> List[Tool]:
    """列出可用工具"""
    return [
        Tool(
            name="generate_dataset",
            description="Generate a deterministic synthetic LiDAR sequence in KITTI layout",
            inputSchema=_schema({"out_dir": {"type": "string", "description": "Dataset root"}})
        ),
        Tool(
            name="train_model",
            description="Run two-stage training and write a checkpoint plus metrics.jsonl",
            inputSchema=_schema({
                "data_dir": {"type": "string"},
                "out_dir": {"type": "string"},
                "checkpoint": {"type": "string"},
                "resume": {"type": "boolean", "description": "Continue from the checkpoint"}
            })
        ),
        Tool(
            name="run_inference",
            description="Sequential closed-loop inference writing per-frame prediction files",
            inputSchema=_schema({
                "checkpoint": {"type": "string"},
                "data_dir": {"type": "string"},
                "out_dir": {"type": "string"}
            }, ["checkpoint"])
        ),
        Tool(
            name="evaluate_predictions",
            description="Per-class IoU, mIoU, moving IoU and instance consistency, optionally against a second run",
            inputSchema=_schema({
                "data_dir": {"type": "string"},
                "pred_dir": {"type": "string"},
                "compare_dir": {"type": "string"},
                "out_dir": {"type": "string"}
            }, ["pred_dir"])
        ),
        Tool(
            name="dump_cluster_labels",
            description="Write stacked points, transferred coarse labels and cluster ids per frame",
            inputSchema=_schema({
                "data_dir": {"type": "string"},
                "out_dir": {"type": "string"},
                "checkpoint": {"type": "string"}
            })
        ),
    ]


@server.call_tool()
async def handle_call_tool(name: str, arguments: Dict[str, Any]) -> List[TextContent]:
    """处理工具调用；计算在工作线程中执行"""
    handler = TOOL_HANDLERS.get(name)
    if handler is None:
        return [TextContent(type="text", text=f"Unknown tool: {name}")]
    try:
        results = await asyncio.to_thread(handler, arguments or {})
    except (KeyError, TypeError) as e:
        logger.error(f"Error in tool {name}: {e}")
        results = {"success": False, "error": f"参数错误: {e}"}
    return [TextContent(type="text", text=json.dumps(to_jsonable(results), indent=2, ensure_ascii=False))]


async def main():
    """主函数"""
    async with stdio_server() as (read_stream, write_stream):
        await server.run(
            read_stream,
            write_stream,
            InitializationOptions(
                server_name=Config.SERVER_NAME,
                server_version=Config.SERVER_VERSION,
                capabilities=server.get_capabilities(
                    notification_options=NotificationOptions(),
                    experimental_capabilities={}
                ),
            ),
        )


if __name__ == "__main__":
    asyncio.run(main())
