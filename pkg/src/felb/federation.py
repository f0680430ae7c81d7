"""
联邦编排模块 - 在模拟客户端上端到端执行近端交替更新与周期同步

每个全局轮次：所有客户端并行执行一轮本地更新（fork），
每 b 轮在屏障处收集载荷、由服务端近端聚合并广播 V̂（join）。
编排器是共享状态 V̂ 的唯一写者。
"""
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
import pandas as pd
from loguru import logger

from . import rng
from .client import ClientState, StepRule, local_objective, local_round
from .errors import ConfigError, DataError, NumericalError
from .matrix import BinaryMatrix, FactorMatrix, boolean_product, round_to_binary
from .metrics import (
    RoundLog,
    f1,
    f1_star,
    integrality_gap,
    mean_integrality_gap,
    rmsd,
    rounds_to_frame,
)
from .privacy import PrivacyConfig, make_payload, noise_draw
from .proximal import ProximityParams, RegularizationParams
from .server import Server, global_objective

T = TypeVar("T")

THREADS_ENV = "FELB_THREADS"


@dataclass(frozen=True)
class FederationConfig:
    """
    联邦运行的全部超参数

    Attributes:
        clients: 客户端数 C
        rank: 分解秩 k
        sync_interval: 同步间隔 b
        max_iterations: 全局轮数 T（0 表示只初始化）
        reg: ELB 正则参数
        prox: 邻近惩罚参数
        rule: 步长规则
        privacy: 隐私设置
        global_seed: 全局种子
        weighted_mean: 聚合时是否按 n_i 加权
        time_limit: 墙钟预算（秒），0 表示不限
    """

    clients: int = 10
    rank: int = 5
    sync_interval: int = 10
    max_iterations: int = 100
    reg: RegularizationParams = field(default_factory=RegularizationParams)
    prox: ProximityParams = field(default_factory=ProximityParams)
    rule: StepRule = field(default_factory=StepRule)
    privacy: PrivacyConfig = field(default_factory=PrivacyConfig)
    global_seed: int = 0
    weighted_mean: bool = False
    time_limit: float = 0.0

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ConfigError(problems)

    def violations(self) -> List[str]:
        return scalar_violations(self.clients, self.rank, self.sync_interval, self.max_iterations, self.time_limit)


def scalar_violations(clients: int, rank: int, sync_interval: int, max_iterations: int, time_limit: float) -> List[str]:
    """联邦标量参数的范围检查，不依赖嵌套配置是否构造成功"""
    problems = []
    if clients < 1:
        problems.append(f"federation.clients 必须 ≥ 1，得到 {clients}")
    if rank < 1:
        problems.append(f"federation.rank 必须 ≥ 1，得到 {rank}")
    if sync_interval < 1:
        problems.append(f"federation.sync_interval 必须 ≥ 1，得到 {sync_interval}")
    if max_iterations < 0:
        problems.append(f"federation.max_iterations 不能为负，得到 {max_iterations}")
    if time_limit < 0:
        problems.append(f"federation.time_limit 不能为负，得到 {time_limit}")
    return problems


@dataclass
class RunHistory:
    """
    一次联邦运行的完整记录

    Attributes:
        rounds: 每个全局轮次一条 RoundLog
        U: 各客户端最终的实值 U_i
        V: 各客户端最终的实值 V_i
        v_hat: 最终 V̂（k×m）
        truncated: 是否因时间预算提前结束
    """

    rounds: List[RoundLog]
    U: List[FactorMatrix]
    V: List[FactorMatrix]
    v_hat: FactorMatrix
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.rounds)

    def rounded(self) -> Tuple[List[BinaryMatrix], BinaryMatrix]:
        """取整后的 (U_i 列表, V̂)"""
        return [round_to_binary(U) for U in self.U], round_to_binary(self.v_hat)

    def reconstruction(self) -> BinaryMatrix:
        """按客户端顺序纵向拼接的布尔重构 [U_i]∘V̂"""
        Us, v_hat = self.rounded()
        return BinaryMatrix.vstack([boolean_product(U, v_hat) for U in Us])

    def to_frame(self, record_timing: bool = False) -> pd.DataFrame:
        return rounds_to_frame(self.rounds, record_timing)


# ---------- 数据划分 ----------


def partition_rows(rows: int, clients: int, seed: int) -> List[np.ndarray]:
    """
    按种子打乱行号后切成 C 个连续块

    Args:
        rows: 总行数 n
        clients: 客户端数 C
        seed: 种子

    Returns:
        List[np.ndarray]: 每个客户端的原始行号，块大小为 ⌊n/C⌋ 或 ⌈n/C⌉
    """
    if clients < 1:
        raise ConfigError([f"客户端数必须 ≥ 1，得到 {clients}"])
    if clients > rows:
        raise DataError(f"客户端数 {clients} 超过数据行数 {rows}")
    perm = rng.generator(seed, rng.Stream.PARTITION).permutation(rows)
    return np.array_split(perm, clients)


def partition(A: BinaryMatrix, clients: int, seed: int) -> List[BinaryMatrix]:
    """水平划分：A = [A_1; …; A_C]，每行恰好属于一个客户端"""
    return [A.take_rows(idx) for idx in partition_rows(A.rows, clients, seed)]


def round_factors(U: FactorMatrix, V: FactorMatrix) -> Tuple[BinaryMatrix, BinaryMatrix]:
    """在 0.5 处取整（0.5 记为 1）"""
    return round_to_binary(U), round_to_binary(V)


# ---------- 并行执行 ----------


def shared_coefficients(rank: int, cols: int, global_seed: int) -> FactorMatrix:
    """服务端下发的公共初始 V⁰（k×m），各客户端的行分量因此一一对应"""
    return rng.generator(global_seed, rng.Stream.INIT).random((rank, cols))


def resolve_workers(workers: Optional[int], clients: int) -> int:
    """工作线程数：显式参数 > 环境变量 FELB_THREADS > CPU 核数，且不超过客户端数"""
    if workers is None:
        env = os.environ.get(THREADS_ENV, "").strip()
        if env:
            try:
                workers = int(env)
            except ValueError:
                raise ConfigError([f"{THREADS_ENV} 必须是正整数，得到 {env!r}"]) from None
        else:
            workers = os.cpu_count() or 1
    if workers < 1:
        raise ConfigError([f"工作线程数必须 ≥ 1，得到 {workers}"])
    return max(1, min(workers, clients))


def _client_map(
    executor: Optional[ThreadPoolExecutor], fn: Callable[[int], T], count: int, round: int
) -> List[T]:
    # 结果按客户端编号收集，与完成顺序无关
    def guarded(i: int) -> T:
        try:
            return fn(i)
        except NumericalError as exc:
            raise exc.with_context(round=round, client=i) from exc

    if executor is None:
        return [guarded(i) for i in range(count)]
    futures = [executor.submit(guarded, i) for i in range(count)]
    return [f.result() for f in futures]


# ---------- 主循环 ----------


class Federation:
    """
    联邦 BMF 模拟器

    Args:
        parts: 各客户端的本地数据 A_i
        cfg: 联邦配置
        masks: 可选的各客户端真值掩码（用于 F1*）
        workers: 工作线程数，None 时读取 FELB_THREADS
    """

    def __init__(
        self,
        parts: Sequence[BinaryMatrix],
        cfg: FederationConfig,
        masks: Optional[Sequence[BinaryMatrix]] = None,
        workers: Optional[int] = None,
    ):
        if not parts:
            raise DataError("至少需要一个客户端的数据")
        cols = parts[0].cols
        for i, part in enumerate(parts):
            if part.cols != cols:
                raise DataError(f"客户端 {i} 的列数 {part.cols} 与客户端 0 的 {cols} 不一致")
        if len(parts) != cfg.clients:
            raise DataError(f"数据块数 {len(parts)} 与配置的客户端数 {cfg.clients} 不一致")
        if masks is not None:
            if len(masks) != len(parts) or any(m.shape != p.shape for m, p in zip(masks, parts)):
                raise DataError("真值掩码与数据块的数量或形状不一致")

        self.parts = list(parts)
        self.cfg = cfg
        self.workers = resolve_workers(workers, len(parts))
        self.full_data = BinaryMatrix.vstack(self.parts)
        self.full_mask = BinaryMatrix.vstack(list(masks)) if masks is not None else None
        self.server = Server(cfg.reg, len(parts), weighted=cfg.weighted_mean)
        v0 = shared_coefficients(cfg.rank, cols, cfg.global_seed)
        self.states = [
            ClientState.initialize(part, cfg.rank, rng.derive_seed(cfg.global_seed, i), V=v0)
            for i, part in enumerate(self.parts)
        ]

    # ---------- 单步 ----------

    def _anchor(self, state: ClientState) -> FactorMatrix:
        # 首次同步前以客户端自身的 V_i 为锚点，邻近拉力为零
        v_hat = self.server.v_hat
        return state.V if v_hat is None else v_hat

    def _payloads(self, executor: Optional[ThreadPoolExecutor], t: int) -> List[FactorMatrix]:
        privacy = self.cfg.privacy

        def payload(i: int) -> FactorMatrix:
            # 噪声只加在上传副本上，客户端自身的 V_i 保持无噪
            draw = noise_draw(privacy, self.cfg.global_seed, i, t)
            return make_payload(self.states[i].V, privacy, draw)

        return _client_map(executor, payload, len(self.states), t)

    def _aggregate(self, executor: Optional[ThreadPoolExecutor], t: int, lam_t: float) -> FactorMatrix:
        payloads = self._payloads(executor, t)
        sizes = [part.rows for part in self.parts]
        try:
            return self.server.aggregate(payloads, lam_t, sizes)
        except NumericalError as exc:
            raise exc.with_context(round=t) from exc

    def _evaluate(self, t: int, elapsed: float) -> RoundLog:
        cfg = self.cfg
        objectives = [local_objective(s, cfg.reg, cfg.prox, self._anchor(s)) for s in self.states]
        recon = BinaryMatrix.vstack(
            [boolean_product(*round_factors(s.U, s.V)) for s in self.states]
        )
        v_hat = self.server.v_hat
        gap = integrality_gap(v_hat) if v_hat is not None else mean_integrality_gap(s.V for s in self.states)
        total = global_objective(objectives, v_hat, cfg.reg) if v_hat is not None else float(sum(objectives))
        return RoundLog(
            round=t,
            mean_local_loss=float(np.mean(objectives)),
            rmsd=rmsd(self.full_data, recon),
            f1=f1(self.full_data, recon),
            f1_star=f1_star(self.full_mask, recon) if self.full_mask is not None else None,
            integrality_gap=gap,
            elapsed_seconds=elapsed,
            global_objective=total,
        )

    # ---------- 运行 ----------

    def run(self, on_round: Optional[Callable[[RoundLog], None]] = None) -> RunHistory:
        """
        执行 T 个全局轮次

        Args:
            on_round: 每轮结束后的回调（进度显示用）

        Returns:
            RunHistory: 完整运行记录
        """
        cfg = self.cfg
        logger.info(
            f"开始联邦运行: C={len(self.states)}, k={cfg.rank}, T={cfg.max_iterations}, "
            f"b={cfg.sync_interval}, 步长={cfg.rule.variant.value}, 隐私={cfg.privacy.mechanism.value}, "
            f"线程={self.workers}"
        )
        rounds: List[RoundLog] = []
        truncated = False
        last_sync = 0
        t = 0
        start = time.perf_counter()

        executor = ThreadPoolExecutor(max_workers=self.workers) if self.workers > 1 else None
        try:
            for t in range(1, cfg.max_iterations + 1):
                if cfg.time_limit and time.perf_counter() - start > cfg.time_limit:
                    truncated = True
                    t -= 1
                    logger.warning(f"超出时间预算 {cfg.time_limit}s，在第 {t} 轮后截断")
                    break

                lam_t = cfg.reg.lam_at(t)
                states = self.states
                self.states = _client_map(
                    executor,
                    lambda i: local_round(states[i], cfg.reg, cfg.prox, cfg.rule, self._anchor(states[i]), lam_t),
                    len(states),
                    t,
                )

                if t % cfg.sync_interval == 0:
                    v_hat = self._aggregate(executor, t, lam_t)
                    self.states = [s.with_v(v_hat) for s in self.states]
                    last_sync = t
                    logger.info(f"第 {t} 轮同步完成，λ_t={lam_t:.6g}")

                log = self._evaluate(t, time.perf_counter() - start)
                logger.debug(
                    f"轮次 {t}: 平均局部目标={log.mean_local_loss:.6g}, F1={log.f1:.4f}, "
                    f"间隙={log.integrality_gap:.4g}"
                )
                rounds.append(log)
                if on_round is not None:
                    on_round(log)

            if last_sync != t or self.server.v_hat is None:
                # 收尾聚合：只产出 V̂，不广播
                self._aggregate(executor, t, cfg.reg.lam_at(t))
        finally:
            if executor is not None:
                executor.shutdown(wait=True)

        logger.info(f"联邦运行结束: {len(rounds)} 轮，用时 {time.perf_counter() - start:.2f}s")
        return RunHistory(
            rounds=rounds,
            U=[s.U for s in self.states],
            V=[s.V for s in self.states],
            v_hat=self.server.v_hat,
            truncated=truncated,
        )


def run_federated(
    parts: Sequence[BinaryMatrix],
    cfg: FederationConfig,
    masks: Optional[Sequence[BinaryMatrix]] = None,
    workers: Optional[int] = None,
    on_round: Optional[Callable[[RoundLog], None]] = None,
) -> RunHistory:
    """
    运行联邦 BMF

    Args:
        parts: 各客户端数据，列数必须一致
        cfg: 联邦配置
        masks: 可选的真值掩码，提供时记录 F1*
        workers: 工作线程数
        on_round: 每轮回调

    Returns:
        RunHistory: 运行记录，包含最终因子与 V̂
    """
    return Federation(parts, cfg, masks=masks, workers=workers).run(on_round)
