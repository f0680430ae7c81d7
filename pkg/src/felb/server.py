"""
服务端模块 - 对客户端系数矩阵做近端平均，得到共享的 V̂
"""
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np
from loguru import logger

from .errors import ConfigError, DataError, ShapeError
from .matrix import FactorMatrix, check_finite
from .proximal import RegularizationParams, elb_value, prox_elb


@dataclass(frozen=True)
class AggregateState:
    """服务端状态：当前 V̂、已完成的聚合次数与客户端数"""

    v_hat: FactorMatrix
    round: int
    client_count: int


def _tree_sum(items: List[FactorMatrix]) -> FactorMatrix:
    # 固定的两两归约顺序
    while len(items) > 1:
        paired = [items[i] + items[i + 1] for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            paired.append(items[-1])
        items = paired
    return items[0]


def mean_payload(payloads: Sequence[FactorMatrix], weights: Optional[Sequence[float]] = None) -> FactorMatrix:
    """
    客户端矩阵的（加权）平均

    先按内容字节序对载荷排序，再做两两树形求和，因此结果与到达顺序无关且逐位可复现。

    Args:
        payloads: 同形的 k×m 矩阵列表
        weights: 可选的样本量权重 n_i，缺省为等权 1/C

    Returns:
        FactorMatrix: 平均矩阵
    """
    if not payloads:
        raise DataError("聚合需要至少一个客户端载荷")
    shape = np.shape(payloads[0])
    for p in payloads[1:]:
        if np.shape(p) != shape:
            raise ShapeError("proximal_aggregate", shape, np.shape(p))
    if weights is None:
        weights = [1.0] * len(payloads)
    if len(weights) != len(payloads):
        raise DataError(f"权重个数 {len(weights)} 与载荷个数 {len(payloads)} 不一致")

    pairs = [(np.asarray(p, dtype=np.float64), float(w)) for p, w in zip(payloads, weights)]
    pairs.sort(key=lambda pw: (pw[1], pw[0].tobytes()))
    total = _tree_sum([w * p for p, w in pairs])
    return total / _tree_sum([np.asarray(w) for _, w in pairs])


def proximal_aggregate(
    payloads: Sequence[FactorMatrix],
    reg: RegularizationParams,
    eta: float = 1.0,
    lam_t: Optional[float] = None,
    weights: Optional[Sequence[float]] = None,
) -> FactorMatrix:
    """
    近端聚合 V̂ ← prox^a_{ηκ, ηλ_t}(mean(V_i))

    Args:
        payloads: 客户端上传的 V_i（可能已加噪）
        reg: 正则参数
        eta: 聚合步长 η（默认 1）
        lam_t: 调用方确定的本轮 λ_t，缺省为 reg.lam
        weights: 可选的 n_i 权重

    Returns:
        FactorMatrix: 新的 V̂
    """
    if not eta > 0:
        raise ConfigError([f"聚合步长 eta 必须为正，得到 {eta}"])
    lam = reg.lam if lam_t is None else lam_t
    mean = check_finite(mean_payload(payloads, weights), "aggregate_mean")
    return check_finite(prox_elb(mean, eta * reg.kappa, eta * lam), "aggregate_prox")


def global_objective(local_objectives: Iterable[float], v_hat: FactorMatrix, reg: RegularizationParams) -> float:
    """全局目标 ΣΦ_i + R(V̂)，仅用于记录"""
    return float(sum(local_objectives)) + elb_value(v_hat, reg)


class Server:
    """中心聚合器，V̂ 的唯一写者"""

    def __init__(self, reg: RegularizationParams, client_count: int, eta: float = 1.0, weighted: bool = False):
        self.reg = reg
        self.eta = eta
        self.weighted = weighted
        self.state: Optional[AggregateState] = None
        self.client_count = client_count

    @property
    def v_hat(self) -> Optional[FactorMatrix]:
        return None if self.state is None else self.state.v_hat

    def aggregate(
        self,
        payloads: Sequence[FactorMatrix],
        lam_t: float,
        sizes: Optional[Sequence[int]] = None,
    ) -> FactorMatrix:
        """屏障：收齐全部 C 个载荷后聚合一次并推进轮次"""
        if len(payloads) != self.client_count:
            raise DataError(f"本轮只收到 {len(payloads)}/{self.client_count} 个载荷")
        weights = list(sizes) if (self.weighted and sizes is not None) else None
        v_hat = proximal_aggregate(payloads, self.reg, self.eta, lam_t, weights)
        if self.state is not None and self.state.v_hat.shape != v_hat.shape:
            raise ShapeError("V̂", self.state.v_hat.shape, v_hat.shape)
        next_round = 1 if self.state is None else self.state.round + 1
        self.state = AggregateState(v_hat=v_hat, round=next_round, client_count=self.client_count)
        logger.debug(f"服务端完成第 {next_round} 次聚合，λ_t={lam_t:.6g}")
        return v_hat
