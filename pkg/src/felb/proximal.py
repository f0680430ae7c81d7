"""
近端算子模块 - ELB 正则项及其三个闭式近端算子

ELB 正则项是分别以 0 和 1 为中心的两个弹性网的逐元素最小值，
在 {0,1} 上恰好为零。步长缩放（ηκ, ηλ, ηγ）一律在调用处完成，
这里的算子保持纯函数。
"""
from dataclasses import dataclass
from typing import List, Union

import numpy as np
import numpy.typing as npt

from .errors import ConfigError, ShapeError
from .matrix import FactorMatrix, check_finite

# 标量或与输入同形的逐元素参数（MU 步长是矩阵）
Weight = Union[float, npt.NDArray[np.float64]]

# 数值近端映射的网格步长
ORACLE_STEP = 1e-5


@dataclass(frozen=True)
class RegularizationParams:
    """ELB 正则参数：L1 权重 kappa、L2 权重 lam、λ 的逐轮增长率 growth"""

    kappa: float = 0.001
    lam: float = 0.1
    growth: float = 1.05

    def __post_init__(self):
        violations = self.violations()
        if violations:
            raise ConfigError(violations)

    def violations(self) -> List[str]:
        problems = []
        for name in ("kappa", "lam"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                problems.append(f"regularization.{name} 必须是有限非负数，得到 {value}")
        if not np.isfinite(self.growth) or self.growth < 1:
            problems.append(f"regularization.growth 必须 ≥ 1，得到 {self.growth}")
        return problems

    def lam_at(self, t: int) -> float:
        """第 t 轮的 λ_t = λ·growth^t，随 t 单调不减"""
        return self.lam * self.growth**t


@dataclass(frozen=True)
class ProximityParams:
    """V̂ 邻近惩罚权重 γ"""

    gamma: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ConfigError([f"proximity.gamma 必须是有限非负数，得到 {self.gamma}"])


def elb_value(X: FactorMatrix, p: RegularizationParams) -> float:
    """
    ELB 正则项取值 Σ min{κ|x|+λx², κ|x−1|+λ(x−1)²}

    Args:
        X: 因子矩阵
        p: 正则参数（未缩放）

    Returns:
        float: 非负标量，当且仅当 X 为 0/1 矩阵时为 0
    """
    x = check_finite(np.asarray(X, dtype=np.float64), "elb_value")
    near_zero = p.kappa * np.abs(x) + p.lam * x * x
    near_one = p.kappa * np.abs(x - 1.0) + p.lam * (x - 1.0) ** 2
    return float(np.minimum(near_zero, near_one).sum())


def _shrink(z, kappa):
    # 软阈值，sign(0) = 0
    return np.sign(z) * np.maximum(np.abs(z) - kappa, 0.0)


def prox_elb(X: FactorMatrix, kappa: Weight, lam: Weight) -> FactorMatrix:
    """
    布尔近端算子（逐元素闭式解）

    x ≤ ½ 时向 0 收缩，否则向 1 收缩；收缩量为软阈值 κ 再除以 (1+λ)。
    x = ½ 恰好走第一分支。kappa/lam 必须是调用方已乘过步长的值，
    可以是标量，也可以是与 X 同形的矩阵（MU 步长）。

    Args:
        X: 输入因子矩阵
        kappa: 缩放后的 L1 权重
        lam: 缩放后的 L2 权重

    Returns:
        FactorMatrix: 近端映射结果
    """
    x = check_finite(np.asarray(X, dtype=np.float64), "prox_elb")
    lower = x <= 0.5
    center = np.where(lower, 0.0, 1.0)
    return center + _shrink(x - center, kappa) / (1.0 + lam)


def prox_proximity(X: FactorMatrix, gamma: Weight, anchor: FactorMatrix) -> FactorMatrix:
    """V̂ 邻近算子：(1+γ)^{-1}(X + γ·anchor)，把 X 拉向锚点"""
    if np.shape(X) != np.shape(anchor):
        raise ShapeError("prox_proximity", np.shape(X), np.shape(anchor))
    return (np.asarray(X, dtype=np.float64) + gamma * anchor) / (1.0 + gamma)


def _ternary(f, lo: float, hi: float, iterations: int = 100) -> float:
    for _ in range(iterations):
        m1 = lo + (hi - lo) / 3.0
        m2 = hi - (hi - lo) / 3.0
        if f(m1) <= f(m2):
            hi = m2
        else:
            lo = m1
    return 0.5 * (lo + hi)


def prox_oracle(x: float, kappa: float, lam: float) -> float:
    """
    数值近端映射，仅供测试校验闭式解

    分别对两张弹性网（各自凸）在 [-2, 3] 上以 1e-5 步长做网格定位，再在网格邻域内三分细化，
    取目标值更小者。目标为 ½(x−y)² + min{κ|y|+½λy², κ|y−1|+½λ(y−1)²}。
    """
    grid = np.arange(-2.0, 3.0 + ORACLE_STEP, ORACLE_STEP)
    best_y, best_value = x, np.inf
    for center in (0.0, 1.0):
        def objective(y, c=center):
            d = y - c
            return 0.5 * (x - y) ** 2 + kappa * np.abs(d) + 0.5 * lam * d * d

        i = int(np.argmin(objective(grid)))
        lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
        y = _ternary(objective, float(lo), float(hi))
        value = float(objective(y))
        if value < best_value:
            best_y, best_value = y, value
    return best_y
