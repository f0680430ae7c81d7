"""
差分隐私模块 - 客户端上传前的载荷加噪

支持范数裁剪，以及高斯、拉普拉斯、伯努利异或三种机制。
每个 (客户端, 轮次) 的噪声都来自独立的计数器随机流，实验可以逐位重放。
"""
import math
from dataclasses import dataclass
from enum import Enum
from typing import List

import numpy as np

from . import rng
from .errors import ConfigError, DataError
from .matrix import FactorMatrix, check_finite


class Mechanism(str, Enum):
    """隐私机制"""

    NONE = "none"
    GAUSSIAN = "gauss"
    LAPLACE = "laplace"
    BERNOULLI_XOR = "bernoulli"

    @classmethod
    def parse(cls, value: str) -> "Mechanism":
        aliases = {"gaussian": "gauss", "bernoulli-xor": "bernoulli", "xor": "bernoulli"}
        key = str(value).strip().lower()
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ConfigError([f"未知的隐私机制 {value!r}，可选 {[m.value for m in cls]}"]) from None

    @property
    def additive(self) -> bool:
        return self in (Mechanism.GAUSSIAN, Mechanism.LAPLACE)


@dataclass(frozen=True)
class PrivacyConfig:
    """
    隐私设置

    Attributes:
        mechanism: 机制
        epsilon: 隐私预算 ε
        delta: 失败概率 δ（仅高斯机制使用）
        clip_theta: Frobenius 范数裁剪阈值 θ > 1
        sensitivity: 未裁剪时使用的敏感度 Δ
        clipped: 加噪前是否先裁剪，裁剪后 Δ = 2θ
    """

    mechanism: Mechanism = Mechanism.NONE
    epsilon: float = 1.0
    delta: float = 0.05
    clip_theta: float = 2.0
    sensitivity: float = 1.0
    clipped: bool = False

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ConfigError(problems)

    def violations(self) -> List[str]:
        problems = []
        if not self.epsilon > 0:
            problems.append(f"privacy.epsilon 必须为正，得到 {self.epsilon}")
        if self.mechanism is Mechanism.GAUSSIAN and not 0 < self.delta < 1:
            problems.append(f"高斯机制要求 privacy.delta ∈ (0,1)，得到 {self.delta}")
        if not self.clip_theta > 1:
            problems.append(f"privacy.clip_theta 必须大于 1，得到 {self.clip_theta}")
        if not self.sensitivity > 0:
            problems.append(f"privacy.sensitivity 必须为正，得到 {self.sensitivity}")
        return problems

    @property
    def enabled(self) -> bool:
        return self.mechanism is not Mechanism.NONE

    @property
    def effective_sensitivity(self) -> float:
        """裁剪时 Δ = 2θ（替换一个客户端的邻接关系），否则为配置值"""
        return 2.0 * self.clip_theta if self.clipped else self.sensitivity


@dataclass(frozen=True)
class NoiseDraw:
    """一次加噪所需的种子与已解析的尺度（σ、b 或翻转概率 p）"""

    seed: int
    scale: float


def gaussian_sigma(delta_sens: float, epsilon: float, delta: float) -> float:
    """σ = Δ·ε⁻¹·sqrt(2·ln(5/(4δ)))"""
    if not (delta_sens > 0 and epsilon > 0 and delta > 0):
        raise ConfigError([f"高斯校准要求 Δ、ε、δ 均为正，得到 Δ={delta_sens}, ε={epsilon}, δ={delta}"])
    if delta > 1.25:
        raise ConfigError([f"高斯校准要求 δ ≤ 5/4，得到 {delta}"])
    return delta_sens / epsilon * math.sqrt(2.0 * math.log(1.25 / delta))


def laplace_scale(delta_sens: float, epsilon: float) -> float:
    """拉普拉斯尺度参数 b = Δ/ε（方差为 2b²）"""
    if not (delta_sens > 0 and epsilon > 0):
        raise ConfigError([f"拉普拉斯校准要求 Δ、ε 均为正，得到 Δ={delta_sens}, ε={epsilon}"])
    return delta_sens / epsilon


def bernoulli_flip_prob(epsilon: float) -> float:
    """随机响应的翻转概率 p = 1/(1+e^ε)，每一位满足 ε-DP"""
    if epsilon < 0:
        raise ConfigError([f"ε 不能为负，得到 {epsilon}"])
    # 写成 e^{-ε}/(1+e^{-ε}) 避免大 ε 溢出
    z = math.exp(-epsilon)
    return z / (1.0 + z)


def clip(V: FactorMatrix, theta: float) -> FactorMatrix:
    """
    Frobenius 范数裁剪：‖V‖_F > θ 时整体缩放到范数 θ

    Args:
        V: 载荷矩阵
        theta: 裁剪阈值，须大于 1

    Returns:
        FactorMatrix: 裁剪后的副本
    """
    if not theta > 1:
        raise ConfigError([f"裁剪阈值必须大于 1，得到 {theta}"])
    V = np.asarray(V, dtype=np.float64)
    norm = float(np.linalg.norm(V))
    if norm > theta:
        return V * (theta / norm)
    return V.copy()


def resolve_scale(cfg: PrivacyConfig) -> float:
    """把机制参数解析为具体尺度"""
    if cfg.mechanism is Mechanism.GAUSSIAN:
        return gaussian_sigma(cfg.effective_sensitivity, cfg.epsilon, cfg.delta)
    if cfg.mechanism is Mechanism.LAPLACE:
        return laplace_scale(cfg.effective_sensitivity, cfg.epsilon)
    if cfg.mechanism is Mechanism.BERNOULLI_XOR:
        return bernoulli_flip_prob(cfg.epsilon)
    return 0.0


def noise_draw(cfg: PrivacyConfig, global_seed: int, client: int, round: int) -> NoiseDraw:
    """(客户端, 轮次) 对应的确定性噪声参数"""
    return NoiseDraw(seed=rng.derive_seed(global_seed, rng.Stream.NOISE, client, round), scale=resolve_scale(cfg))


def _is_boolean(V: FactorMatrix) -> bool:
    return bool(np.all((V == 0) | (V == 1)))


def apply_noise(V: FactorMatrix, cfg: PrivacyConfig, draw: NoiseDraw) -> FactorMatrix:
    """
    对载荷加噪，返回新矩阵，不修改输入

    高斯/拉普拉斯为逐元素加性噪声（开启裁剪时先裁剪）；
    伯努利机制以概率 p 独立翻转每一位，只接受 0/1 载荷。

    Args:
        V: 载荷
        cfg: 隐私设置
        draw: 种子与尺度

    Returns:
        FactorMatrix: 加噪后的载荷
    """
    V = np.asarray(V, dtype=np.float64)
    if cfg.mechanism is Mechanism.NONE:
        return V.copy()

    gen = rng.generator(draw.seed)
    if cfg.mechanism is Mechanism.BERNOULLI_XOR:
        if not _is_boolean(V):
            raise DataError("伯努利异或机制只能作用于 0/1 载荷")
        flips = gen.random(V.shape) < draw.scale
        return np.where(flips, 1.0 - V, V)

    if cfg.clipped:
        V = clip(V, cfg.clip_theta)
    if cfg.mechanism is Mechanism.GAUSSIAN:
        noise = gen.normal(0.0, draw.scale, size=V.shape)
    else:
        noise = gen.laplace(0.0, draw.scale, size=V.shape)
    return check_finite(V + noise, "privacy_noise")


def make_payload(V: FactorMatrix, cfg: PrivacyConfig, draw: NoiseDraw, boolean: bool = False) -> FactorMatrix:
    """
    生成上传载荷

    实值载荷遇到伯努利机制时先在 0.5 处取整再翻转；
    布尔载荷（聚合基线）遇到加性机制时加噪后再在 0.5 处取整。

    Args:
        V: 客户端的 V_i（不会被修改）
        cfg: 隐私设置
        draw: 噪声参数
        boolean: 载荷是否应保持 0/1

    Returns:
        FactorMatrix: 载荷副本
    """
    V = np.asarray(V, dtype=np.float64)
    if cfg.mechanism is Mechanism.BERNOULLI_XOR and not _is_boolean(V):
        V = (V >= 0.5).astype(np.float64)
    noisy = apply_noise(V, cfg, draw)
    if boolean and cfg.mechanism.additive:
        noisy = (noisy >= 0.5).astype(np.float64)
    return noisy
