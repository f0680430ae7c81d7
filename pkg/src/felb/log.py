"""
日志模块 - 配置 loguru 的控制台与文件输出
"""
import os
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from loguru import logger

CONSOLE_FORMAT = (
    "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <blue>{elapsed}</blue> | "
    "<level>{level.icon} {level: <8}</level> | "
    "<cyan>{name}:{function}:{line}</cyan> - <level>{message}</level>"
)
FILE_FORMAT = (
    "{time:YYYY-MM-DD HH:mm:ss} | {elapsed} | {level.icon} {level: <8} | "
    "{name}:{function}:{line} - {message}"
)


def setup_logger(
    app_name: str = "felb",
    log_dir: Optional[Union[str, Path]] = None,
    level: Optional[str] = None,
) -> Tuple[Any, Dict[str, Any]]:
    """
    配置 Loguru 日志系统

    Args:
        app_name: 应用名称，用于日志目录
        log_dir: 日志根目录，为空时只输出到控制台
        level: 控制台日志级别，默认读取 FELB_LOG_LEVEL，否则为 INFO

    Returns:
        Tuple[logger, Dict]: logger 对象与配置信息（含日志文件路径）
    """
    console_level = level or os.environ.get("FELB_LOG_LEVEL", "INFO")

    # 清除默认处理器
    logger.remove()
    logger.add(sys.stderr, level=console_level, format=CONSOLE_FORMAT)

    config_info: Dict[str, Any] = {"log_file": None, "level": console_level}
    if log_dir is not None:
        now = datetime.now()
        target = Path(log_dir) / "logs" / app_name / now.strftime("%Y-%m-%d") / now.strftime("%H")
        target.mkdir(parents=True, exist_ok=True)
        log_file = target / f"{now.strftime('%M%S')}.log"
        logger.add(
            str(log_file),
            level="DEBUG",
            rotation="10 MB",
            retention="30 days",
            compression="zip",
            encoding="utf-8",
            format=FILE_FORMAT,
        )
        config_info["log_file"] = str(log_file)

    logger.info(f"日志系统已初始化，应用名称: {app_name}")
    return logger, config_info
