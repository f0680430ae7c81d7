"""
基线模块 - 对任意本地 BMF 求解器做事后联邦，以及松弛解的阈值取整

流程：每个客户端独立分解 → 按聚合函数合并各自的 V_i → 广播 V̂ 替换 V_i。
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from loguru import logger
from scipy import sparse

from . import rng
from .client import ClientState, StepRule, local_round
from .errors import ConfigError, DataError, LocalSolverError, ShapeError
from .federation import round_factors
from .matrix import BinaryMatrix, FactorMatrix
from .privacy import PrivacyConfig, make_payload, noise_draw
from .proximal import ProximityParams, RegularizationParams

# 阈值搜索网格：[1e-12, 1] 上等距 100 个点
THRESHOLD_GRID = np.linspace(1e-12, 1.0, 100)


class LocalFactorizer(Protocol):
    """本地 BMF 求解器：(A, k, seed) → (U, V)，均为 0/1 矩阵"""

    name: str

    def __call__(self, A: BinaryMatrix, k: int, seed: int) -> Tuple[BinaryMatrix, BinaryMatrix]:
        ...


class AggFunction(str, Enum):
    """布尔聚合函数"""

    AVG = "avg"
    VOTE = "vote"
    OR = "or"


# ---------- 聚合函数 ----------


def _vote_counts(Vs: Sequence[BinaryMatrix]) -> sparse.csr_array:
    if not Vs:
        raise DataError("聚合需要至少一个客户端矩阵")
    for V in Vs[1:]:
        if V.shape != Vs[0].shape:
            raise ShapeError("aggregate", Vs[0].shape, V.shape)
    total = sparse.csr_array(Vs[0].shape, dtype=np.int64)
    for V in Vs:
        total = total + V.csr.astype(np.int64)
    return sparse.csr_array(total)


def _at_least(counts: sparse.csr_array, threshold: float) -> BinaryMatrix:
    # 阈值恒为正，隐式零不可能达标，只看已存储的计数
    kept = counts.copy()
    kept.data = (kept.data >= threshold).astype(np.int64)
    return BinaryMatrix(kept)


def agg_rounded_average(Vs: Sequence[BinaryMatrix]) -> BinaryMatrix:
    """⌊C⁻¹ΣV^c⌉，恰为 0.5 时取 1"""
    counts = _vote_counts(Vs)
    kept = counts.astype(np.float64)
    kept.data = (kept.data / len(Vs) >= 0.5).astype(np.int64)
    return BinaryMatrix(kept)


def agg_majority_vote(Vs: Sequence[BinaryMatrix]) -> BinaryMatrix:
    """票数 ≥ C/2 的位置为 1"""
    return _at_least(_vote_counts(Vs), len(Vs) / 2)


def agg_logical_or(Vs: Sequence[BinaryMatrix]) -> BinaryMatrix:
    """逐元素析取"""
    return _at_least(_vote_counts(Vs), 1)


AGGREGATORS: Dict[AggFunction, Callable[[Sequence[BinaryMatrix]], BinaryMatrix]] = {
    AggFunction.AVG: agg_rounded_average,
    AggFunction.VOTE: agg_majority_vote,
    AggFunction.OR: agg_logical_or,
}


# ---------- 阈值取整 ----------


def _loss_grid(U: FactorMatrix, V: FactorMatrix, A: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """losses[a, b] = ‖A − [U≥α_a]∘[V≥β_b]‖（不匹配单元格数）"""
    positives = A.astype(bool)
    n_neg = int(positives.size - positives.sum())
    losses = np.empty((grid.size, grid.size), dtype=np.int64)
    for a, alpha in enumerate(grid):
        Ub = U >= alpha
        # reach[i,j] = max_{l: Ub[i,l]} V[l,j]；[V≥β] 与 Ub 的布尔积为 1 当且仅当 reach ≥ β
        reach = np.full(A.shape, -np.inf)
        for l in range(U.shape[1]):
            np.maximum(reach, np.where(Ub[:, l : l + 1], V[l : l + 1, :], -np.inf), out=reach)
        pos = np.sort(reach[positives])
        neg = np.sort(reach[~positives])
        false_neg = np.searchsorted(pos, grid, side="left")
        false_pos = n_neg - np.searchsorted(neg, grid, side="left")
        losses[a] = false_neg + false_pos
    return losses


def threshold_round_search(
    U: FactorMatrix, V: FactorMatrix, parts: Sequence[BinaryMatrix], grid: Optional[np.ndarray] = None
) -> Tuple[float, float, BinaryMatrix, BinaryMatrix]:
    """
    在 100×100 阈值网格上寻找使重构误差最小的 (α, β)

    所有客户端共用一对阈值；U 为各客户端 U_i 按顺序纵向拼接。
    误差相同时取字典序最小的 (α, β)。

    Args:
        U: 拼接后的实值 U（Σn_i×k）
        V: 实值 V（k×m）
        parts: 各客户端数据
        grid: 阈值网格，缺省为 THRESHOLD_GRID

    Returns:
        Tuple[float, float, BinaryMatrix, BinaryMatrix]: (α, β, [U≥α], [V≥β])
    """
    grid = THRESHOLD_GRID if grid is None else np.asarray(grid, dtype=np.float64)
    A = BinaryMatrix.vstack(list(parts))
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if U.shape[0] != A.rows or V.shape[1] != A.cols or U.shape[1] != V.shape[0]:
        raise ShapeError("threshold_round_search", A.shape, (U.shape[0], U.shape[1], V.shape[1]))

    losses = _loss_grid(U, V, A.to_dense(), grid)
    a, b = np.unravel_index(int(np.argmin(losses)), losses.shape)
    alpha, beta = float(grid[a]), float(grid[b])
    logger.debug(f"阈值搜索: α={alpha:.4g}, β={beta:.4g}, 误差={int(losses[a, b])}")
    return (
        alpha,
        beta,
        BinaryMatrix.from_dense((U >= alpha).astype(np.int8)),
        BinaryMatrix.from_dense((V >= beta).astype(np.int8)),
    )


# ---------- 本地求解器 ----------


@dataclass(frozen=True)
class ReferenceSettings:
    """集中式松弛求解器自身的超参数"""

    iterations: int = 1000
    reg: RegularizationParams = field(default_factory=lambda: RegularizationParams(kappa=0.01, lam=0.01, growth=1.02))
    rule: StepRule = field(default_factory=lambda: StepRule(inertia_beta=0.01))

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError([f"baseline.local_iterations 不能为负，得到 {self.iterations}"])


def relaxed_factorize(
    A: BinaryMatrix, k: int, seed: int, settings: Optional[ReferenceSettings] = None
) -> Tuple[FactorMatrix, FactorMatrix]:
    """
    单客户端、无同步的松弛分解（γ=0），返回实值因子

    Args:
        A: 数据
        k: 秩
        seed: 种子
        settings: 求解器超参数

    Returns:
        Tuple[FactorMatrix, FactorMatrix]: (U, V)
    """
    settings = settings or ReferenceSettings()
    if not 1 <= k <= min(A.rows, A.cols):
        raise DataError(f"秩 k={k} 必须在 [1, min{A.shape}] 内")
    state = ClientState.initialize(A, k, rng.derive_seed(seed, rng.Stream.LOCAL_SOLVER))
    no_pull = ProximityParams(gamma=0.0)
    for t in range(1, settings.iterations + 1):
        state = local_round(state, settings.reg, no_pull, settings.rule, state.V, settings.reg.lam_at(t))
    return state.U, state.V


def reference_local_factorizer(
    A: BinaryMatrix, k: int, seed: int, settings: Optional[ReferenceSettings] = None
) -> Tuple[BinaryMatrix, BinaryMatrix]:
    """集中式参考求解器：松弛分解后在 0.5 处取整"""
    U, V = relaxed_factorize(A, k, seed, settings)
    return round_factors(U, V)


class ReferenceFactorizer:
    """reference_local_factorizer 的 LocalFactorizer 包装"""

    name = "reference"

    def __init__(self, settings: Optional[ReferenceSettings] = None):
        self.settings = settings or ReferenceSettings()

    def __call__(self, A: BinaryMatrix, k: int, seed: int) -> Tuple[BinaryMatrix, BinaryMatrix]:
        return reference_local_factorizer(A, k, seed, self.settings)


class RelaxedFactorizer:
    """松弛分解 + 阈值网格取整"""

    name = "relaxed-threshold"

    def __init__(self, settings: Optional[ReferenceSettings] = None):
        self.settings = settings or ReferenceSettings()

    def __call__(self, A: BinaryMatrix, k: int, seed: int) -> Tuple[BinaryMatrix, BinaryMatrix]:
        U, V = relaxed_factorize(A, k, seed, self.settings)
        _, _, Ub, Vb = threshold_round_search(U, V, [A])
        return Ub, Vb


# ---------- 聚合式 BMF ----------


def run_aggregated_bmf(
    parts: Sequence[BinaryMatrix],
    algo: LocalFactorizer,
    agg: AggFunction,
    k: int,
    seed: int,
    privacy: Optional[PrivacyConfig] = None,
) -> Tuple[List[BinaryMatrix], BinaryMatrix]:
    """
    聚合式 BMF：本地分解 → 聚合 V_i → 广播 V̂

    Args:
        parts: 各客户端数据
        algo: 本地求解器
        agg: 聚合函数
        k: 秩
        seed: 全局种子，客户端 i 使用 hash(seed, i)
        privacy: 可选的上传加噪设置

    Returns:
        Tuple[List[BinaryMatrix], BinaryMatrix]: (各客户端 U_i, V̂)
    """
    if not parts:
        raise DataError("至少需要一个客户端的数据")
    for i, part in enumerate(parts):
        if part.cols != parts[0].cols:
            raise DataError(f"客户端 {i} 的列数 {part.cols} 与客户端 0 的 {parts[0].cols} 不一致")

    Us: List[BinaryMatrix] = []
    Vs: List[BinaryMatrix] = []
    for i, part in enumerate(parts):
        try:
            U, V = algo(part, k, rng.derive_seed(seed, i))
        except LocalSolverError:
            raise
        except Exception as exc:
            raise LocalSolverError(i, exc) from exc
        if U.shape != (part.rows, k) or V.shape != (k, part.cols):
            expected = (part.rows, k, part.cols)
            raise LocalSolverError(i, ShapeError(getattr(algo, "name", "local solver"), expected, U.shape + V.shape))
        if privacy is not None and privacy.enabled:
            draw = noise_draw(privacy, seed, i, 0)
            noisy = make_payload(V.to_dense().astype(np.float64), privacy, draw, boolean=True)
            V = BinaryMatrix.from_dense(noisy.astype(np.int8))
        Us.append(U)
        Vs.append(V)

    v_hat = AGGREGATORS[AggFunction(agg)](Vs)
    name = getattr(algo, "name", "?")
    logger.info(f"聚合式 BMF 完成: C={len(parts)}, 求解器={name}, 聚合={AggFunction(agg).value}")
    return Us, v_hat
