"""
评估指标模块 - RMSD、F1、F1*、整数性间隙与逐轮记录
"""
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Union

import numpy as np
import pandas as pd

from .errors import ShapeError
from .io_utils import atomic_path
from .matrix import BinaryMatrix, FactorMatrix

# history.csv 的固定表头
HISTORY_COLUMNS = [
    "round",
    "mean_local_loss",
    "global_rmsd",
    "f1",
    "f1_star",
    "integrality_gap_vhat",
    "elapsed_seconds",
]


@dataclass(frozen=True)
class RoundLog:
    """一个全局轮次的记录"""

    round: int
    mean_local_loss: float
    rmsd: float
    f1: float
    f1_star: Optional[float]
    integrality_gap: float
    elapsed_seconds: float
    global_objective: float = float("nan")

    def to_row(self, record_timing: bool = False) -> dict:
        return {
            "round": self.round,
            "mean_local_loss": self.mean_local_loss,
            "global_rmsd": self.rmsd,
            "f1": self.f1,
            "f1_star": np.nan if self.f1_star is None else self.f1_star,
            "integrality_gap_vhat": self.integrality_gap,
            "elapsed_seconds": self.elapsed_seconds if record_timing else np.nan,
        }


def _require_same_shape(what: str, A: BinaryMatrix, B: BinaryMatrix) -> None:
    if A.shape != B.shape:
        raise ShapeError(what, A.shape, B.shape)


def hamming(A: BinaryMatrix, B: BinaryMatrix) -> int:
    """不同单元格的个数"""
    _require_same_shape("hamming", A, B)
    return A.xor(B).nnz


def rmsd(A: BinaryMatrix, B: BinaryMatrix) -> float:
    """sqrt(Σ(A−B)² / (rows·cols))，空矩阵记为 0"""
    _require_same_shape("rmsd", A, B)
    cells = A.rows * A.cols
    if cells == 0:
        return 0.0
    return math.sqrt(hamming(A, B) / cells)


def _f1_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    if denom == 0:
        # 两者全零
        return 1.0
    return 2 * tp / denom


def f1(A: BinaryMatrix, B: BinaryMatrix) -> float:
    """
    以 1 为正类的 F1 = 2TP / (2TP + FP + FN)

    Args:
        A: 参考矩阵
        B: 重构矩阵

    Returns:
        float: F1，两者全零时为 1
    """
    _require_same_shape("f1", A, B)
    tp = int(A.csr.multiply(B.csr).sum())
    return _f1_counts(tp, B.nnz - tp, A.nnz - tp)


def f1_star(mask: BinaryMatrix, B: BinaryMatrix) -> float:
    """以无噪声的种植掩码为正类参考的 F1，只衡量信号恢复"""
    _require_same_shape("f1_star", mask, B)
    return f1(mask, B)


def integrality_gap(X: FactorMatrix) -> float:
    """逐元素 min(|x|, |x−1|) 的均值"""
    X = np.asarray(X, dtype=np.float64)
    if X.size == 0:
        return 0.0
    return float(np.mean(np.minimum(np.abs(X), np.abs(X - 1.0))))


def mean_integrality_gap(factors: Iterable[FactorMatrix]) -> float:
    gaps = [integrality_gap(X) for X in factors]
    return float(np.mean(gaps)) if gaps else 0.0


def rounds_to_frame(logs: Iterable[RoundLog], record_timing: bool = False) -> pd.DataFrame:
    """逐轮记录转 DataFrame，列顺序固定为 HISTORY_COLUMNS"""
    rows = [log.to_row(record_timing) for log in logs]
    frame = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
    return frame.astype({"round": "int64"})


def write_rounds_csv(
    logs: Iterable[RoundLog], path: Union[str, Path], record_timing: bool = False
) -> pd.DataFrame:
    """
    写出 history.csv：浮点保留 9 位有效数字，缺失值写为空

    Returns:
        pd.DataFrame: 写出的表
    """
    frame = rounds_to_frame(logs, record_timing)
    with atomic_path(path) as tmp:
        frame.to_csv(tmp, index=False, float_format="%.9g", na_rep="")
    return frame


def summarize(logs: List[RoundLog]) -> dict:
    """最后一轮的指标摘要，供 summary.json 使用"""
    if not logs:
        return {"rounds": 0}
    last = logs[-1]
    summary = {"rounds": len(logs), **asdict(last)}
    summary["elapsed_seconds_total"] = float(last.elapsed_seconds)
    return summary
