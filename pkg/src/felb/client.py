"""
客户端模块 - 单个联邦客户端的本地 iPALM 交替更新

每轮先更新 U 再更新 V（V 的梯度使用刚提交的 U），每个块依次执行：
惯性外推 → 梯度步 → 布尔近端；V 块最后再做 V̂ 邻近拉回。
损失约定为 ‖A−UV‖²_F（无 ½），梯度 2(UV−A)Vᵀ，Lipschitz 常数 2‖VVᵀ‖₂。
"""
import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from loguru import logger
from scipy import sparse

from . import rng
from .errors import ConfigError, NumericalError, ShapeError
from .matrix import BinaryMatrix, FactorMatrix, check_finite, spectral_norm
from .proximal import ProximityParams, RegularizationParams, elb_value, prox_elb, prox_proximity

# Lipschitz 常数的分母保护与步长上限
LIPSCHITZ_EPS = 1e-12
MAX_LIPSCHITZ_STEP = 1e6


class StepVariant(str, Enum):
    """步长规则：Lipschitz（FELB）或乘性更新（FELB-MU）"""

    LIPSCHITZ = "lipschitz"
    MULTIPLICATIVE = "mu"


@dataclass(frozen=True)
class StepRule:
    variant: StepVariant = StepVariant.LIPSCHITZ
    inertia_beta: float = 0.001
    mu_epsilon: float = 1e-12

    def __post_init__(self):
        problems = []
        if not 0 <= self.inertia_beta < 1:
            problems.append(f"step.inertia_beta 必须在 [0, 1) 内，得到 {self.inertia_beta}")
        if not 0 < self.mu_epsilon <= 1e-8:
            problems.append(f"step.mu_epsilon 必须在 (0, 1e-8] 内，得到 {self.mu_epsilon}")
        if problems:
            raise ConfigError(problems)

    @property
    def is_mu(self) -> bool:
        return self.variant is StepVariant.MULTIPLICATIVE


@dataclass(frozen=True)
class ClientState:
    """
    一个客户端的全部本地状态

    Attributes:
        data: 本地数据 A_i（n_i×m）
        U: 本地特征矩阵（n_i×k）
        V: 本地系数矩阵（k×m）
        U_prev: 上一轮的 U（惯性项使用）
        V_prev: 上一轮的 V
        iteration: 已完成的本地轮数 t
        rng_seed: 本客户端的 64 位种子
    """

    data: BinaryMatrix
    U: FactorMatrix
    V: FactorMatrix
    U_prev: FactorMatrix
    V_prev: FactorMatrix
    iteration: int = 0
    rng_seed: int = 0
    _real: sparse.csr_array = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        n, m = self.data.shape
        if self.U.shape[0] != n or self.V.shape[1] != m or self.U.shape[1] != self.V.shape[0]:
            raise ShapeError("ClientState", (n, m), (self.U.shape[0], self.U.shape[1], self.V.shape[1]))
        if self.U_prev.shape != self.U.shape or self.V_prev.shape != self.V.shape:
            raise ShapeError("ClientState 前一轮迭代", self.U.shape + self.V.shape, self.U_prev.shape + self.V_prev.shape)
        if self._real is None:
            object.__setattr__(self, "_real", self.data.to_real())

    @classmethod
    def initialize(
        cls, data: BinaryMatrix, rank: int, seed: int, V: Optional[FactorMatrix] = None
    ) -> "ClientState":
        """
        U、V 各元素独立取自 [0,1] 均匀分布

        Args:
            data: 本地数据 A_i
            rank: 分解秩 k
            seed: 本客户端种子
            V: 服务端下发的公共初始 V⁰，给定时只在本地抽取 U
        """
        gen = rng.generator(seed, rng.Stream.INIT)
        U = gen.random((data.rows, rank))
        if V is None:
            V = gen.random((rank, data.cols))
        elif V.shape != (rank, data.cols):
            raise ShapeError("ClientState 初始 V", (rank, data.cols), V.shape)
        else:
            V = np.array(V, dtype=np.float64)
        return cls(data=data, U=U, V=V, U_prev=U.copy(), V_prev=V.copy(), iteration=0, rng_seed=seed)

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    @property
    def real_data(self) -> sparse.csr_array:
        return self._real

    def advance(self, U: FactorMatrix, V: FactorMatrix) -> "ClientState":
        return dataclasses.replace(self, U=U, V=V, U_prev=self.U, V_prev=self.V, iteration=self.iteration + 1)

    def with_v(self, V: FactorMatrix) -> "ClientState":
        """同步后用 V̂ 替换本地 V（惯性历史一并重置，避免跨越同步外推）"""
        return dataclasses.replace(self, V=V.copy(), V_prev=V.copy())


# ---------- 梯度与步长 ----------


def _as_real(A) -> sparse.csr_array:
    return A.to_real() if isinstance(A, BinaryMatrix) else A


def grad_u(A, U: FactorMatrix, V: FactorMatrix) -> FactorMatrix:
    """
    ‖A−UV‖² 对 U 的梯度 2(UV−A)Vᵀ

    Args:
        A: n×m 数据（BinaryMatrix 或其稀疏实值形式）
        U: n×k
        V: k×m

    Returns:
        FactorMatrix: n×k 梯度
    """
    if A.shape[0] != U.shape[0] or U.shape[1] != V.shape[0] or A.shape[1] != V.shape[1]:
        raise ShapeError("grad_u", A.shape, (U.shape[0], V.shape[1]))
    AVt = np.asarray(_as_real(A) @ V.T)
    return 2.0 * (U @ (V @ V.T) - AVt)


def grad_v(A, U: FactorMatrix, V: FactorMatrix) -> FactorMatrix:
    """‖A−UV‖² 对 V 的梯度 2Uᵀ(UV−A)"""
    if A.shape[0] != U.shape[0] or U.shape[1] != V.shape[0] or A.shape[1] != V.shape[1]:
        raise ShapeError("grad_v", A.shape, (U.shape[0], V.shape[1]))
    UtA = np.asarray(_as_real(A).T @ U).T
    return 2.0 * ((U.T @ U) @ V - UtA)


def _lipschitz_step(factor: FactorMatrix, stage: str) -> float:
    sigma = spectral_norm(factor)
    eta = 1.0 / (2.0 * sigma * sigma + LIPSCHITZ_EPS)
    if eta > MAX_LIPSCHITZ_STEP:
        logger.warning(f"{stage}: 因子接近零矩阵，步长截断为 {MAX_LIPSCHITZ_STEP:g}")
        eta = MAX_LIPSCHITZ_STEP
    return eta


def lipschitz_eta_u(V: FactorMatrix) -> float:
    """U 块的步长 1/L，L = 2‖VVᵀ‖₂"""
    return _lipschitz_step(V, "lipschitz_eta_u")


def lipschitz_eta_v(U: FactorMatrix) -> float:
    """V 块的步长 1/L，L = 2‖UᵀU‖₂"""
    return _lipschitz_step(U, "lipschitz_eta_v")


def _require_nonnegative(X: FactorMatrix, stage: str) -> None:
    if np.any(X < 0):
        raise NumericalError(stage, "乘性更新要求非负迭代")


def mu_eta_u(U: FactorMatrix, V: FactorMatrix, eps: float = 1e-12) -> FactorMatrix:
    """乘性更新步长矩阵 U ⊘ (UVVᵀ + ε)"""
    _require_nonnegative(U, "mu_eta_u")
    return U / (U @ (V @ V.T) + eps)


def mu_eta_v(U: FactorMatrix, V: FactorMatrix, eps: float = 1e-12) -> FactorMatrix:
    """乘性更新步长矩阵 V ⊘ (UᵀUV + ε)"""
    _require_nonnegative(V, "mu_eta_v")
    return V / ((U.T @ U) @ V + eps)


# ---------- 块更新 ----------


def _extrapolate(X: FactorMatrix, X_prev: FactorMatrix, rule: StepRule) -> FactorMatrix:
    extrapolated = X + rule.inertia_beta * (X - X_prev)
    if rule.is_mu:
        extrapolated = np.maximum(extrapolated, 0.0)
    return extrapolated


def update_u(
    A,
    U: FactorMatrix,
    U_prev: FactorMatrix,
    V: FactorMatrix,
    reg: RegularizationParams,
    lam_t: float,
    rule: StepRule,
) -> FactorMatrix:
    """
    U 块的一次 外推 → 梯度步 → 布尔近端

    Returns:
        FactorMatrix: 新的 U
    """
    A = _as_real(A)
    U_ext = _extrapolate(U, U_prev, rule)
    gradient = grad_u(A, U_ext, V)
    if rule.is_mu:
        eta = mu_eta_u(U_ext, V, rule.mu_epsilon)
        stepped = U_ext - eta * (0.5 * gradient)
    else:
        eta = lipschitz_eta_u(V)
        stepped = U_ext - eta * gradient
    check_finite(stepped, "u_gradient_step")
    U_new = prox_elb(stepped, eta * reg.kappa, eta * lam_t)
    if rule.is_mu:
        U_new = np.maximum(U_new, 0.0)
    return check_finite(U_new, "u_prox")


def update_v(
    A,
    U: FactorMatrix,
    V: FactorMatrix,
    V_prev: FactorMatrix,
    reg: RegularizationParams,
    lam_t: float,
    prox: ProximityParams,
    rule: StepRule,
    anchor: FactorMatrix,
) -> FactorMatrix:
    """V 块：外推 → 梯度步 → 布尔近端 → 向 anchor 的邻近拉回"""
    A = _as_real(A)
    if anchor.shape != V.shape:
        raise ShapeError("update_v anchor", anchor.shape, V.shape)
    V_ext = _extrapolate(V, V_prev, rule)
    gradient = grad_v(A, U, V_ext)
    if rule.is_mu:
        eta = mu_eta_v(U, V_ext, rule.mu_epsilon)
        stepped = V_ext - eta * (0.5 * gradient)
    else:
        eta = lipschitz_eta_v(U)
        stepped = V_ext - eta * gradient
    check_finite(stepped, "v_gradient_step")
    V_new = prox_elb(stepped, eta * reg.kappa, eta * lam_t)
    if rule.is_mu:
        V_new = np.maximum(V_new, 0.0)
    check_finite(V_new, "v_prox")
    V_new = prox_proximity(V_new, eta * prox.gamma, anchor)
    return check_finite(V_new, "v_proximity")


def local_round(
    state: ClientState,
    reg: RegularizationParams,
    prox: ProximityParams,
    rule: StepRule,
    anchor: FactorMatrix,
    lam_t: Optional[float] = None,
) -> ClientState:
    """
    执行一轮本地交替更新

    Args:
        state: 当前客户端状态
        reg: 正则参数
        prox: 邻近参数
        rule: 步长规则
        anchor: 当前 V̂（首次同步前为客户端自身的 V）
        lam_t: 调用方确定的本轮 λ_t，缺省为 reg.lam_at(iteration + 1)

    Returns:
        ClientState: 后继状态（iteration + 1）
    """
    if lam_t is None:
        lam_t = reg.lam_at(state.iteration + 1)
    A = state.real_data
    U_new = update_u(A, state.U, state.U_prev, state.V, reg, lam_t, rule)
    V_new = update_v(A, U_new, state.V, state.V_prev, reg, lam_t, prox, rule, anchor)
    return state.advance(U_new, V_new)


def reconstruction_loss(A, U: FactorMatrix, V: FactorMatrix) -> float:
    """‖A−UV‖²_F，按 ‖A‖² − 2⟨A,UV⟩ + ‖UV‖² 计算，无需稠密化 A"""
    A = _as_real(A)
    cross = float(np.sum(np.asarray(A @ V.T) * U))
    quad = float(np.sum((U.T @ U) * (V @ V.T)))
    return max(float(A.multiply(A).sum()) - 2.0 * cross + quad, 0.0)


def local_objective(
    state: ClientState,
    reg: RegularizationParams,
    prox: ProximityParams,
    anchor: FactorMatrix,
) -> float:
    """Φ_i = ‖A−UV‖² + R(U) + R(V) + γ‖V−anchor‖²"""
    drift = state.V - anchor
    return (
        reconstruction_loss(state.real_data, state.U, state.V)
        + elb_value(state.U, reg)
        + elb_value(state.V, reg)
        + prox.gamma * float(np.vdot(drift, drift))
    )
