"""
输出工具模块 - 原子写入、JSON-lines 旁注文件、CSV 历史
"""
import json
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, Union

PathLike = Union[str, Path]


@contextmanager
def atomic_path(path: PathLike) -> Iterator[Path]:
    """
    先写临时文件再重命名，保证目标文件要么是旧内容要么是完整的新内容

    Args:
        path: 最终目标路径

    Yields:
        Path: 应写入的临时文件路径
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_name(target.name + ".tmp")
    try:
        yield tmp
        os.replace(tmp, target)
    finally:
        if tmp.exists():
            tmp.unlink()


def write_text_atomic(path: PathLike, text: str) -> None:
    with atomic_path(path) as tmp:
        tmp.write_text(text, encoding="utf-8")


def write_json(path: PathLike, payload: Dict[str, Any]) -> None:
    """保存 JSON（UTF-8、缩进 2、键排序，便于逐字节比较）"""
    write_text_atomic(path, json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True) + "\n")


def write_jsonl(path: PathLike, records: Iterable[Dict[str, Any]]) -> None:
    lines = [json.dumps(r, ensure_ascii=False, sort_keys=True) for r in records]
    write_text_atomic(path, "\n".join(lines) + "\n")


def read_jsonl(path: PathLike) -> list:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
