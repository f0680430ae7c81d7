"""
随机流模块 - 基于计数器的可复现随机数流

所有随机性都来自以 "种子路径" 为键的 Philox 生成器：
(全局种子, 用途标签, 客户端编号, 轮次, ...)。同一路径永远得到同一条流，
与线程调度和调用顺序无关。
"""
from enum import IntEnum
from typing import Iterable

import numpy as np

MASK64 = (1 << 64) - 1


class Stream(IntEnum):
    """随机流用途标签"""

    INIT = 1
    NOISE = 2
    PARTITION = 3
    PLANT = 4
    XOR = 5
    LOCAL_SOLVER = 6


def _entropy(path: Iterable[int]) -> list:
    return [int(p) & MASK64 for p in path]


def generator(*path: int) -> np.random.Generator:
    """
    按种子路径构造 Philox 生成器

    Args:
        *path: 非负整数序列，第一个元素通常是全局种子

    Returns:
        np.random.Generator: 独立的随机流
    """
    seq = np.random.SeedSequence(_entropy(path))
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(*path: int) -> int:
    """把种子路径哈希为一个 64 位种子，例如 hash(global_seed, client_index)"""
    state = np.random.SeedSequence(_entropy(path)).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 32) | int(state[1])
