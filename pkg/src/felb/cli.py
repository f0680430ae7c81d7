"""
felb - 命令行界面模块

提供基于 Typer 的命令行界面：generate 生成合成数据，run 执行联邦分解或聚合基线，
evaluate 比较重构与参考矩阵，sweep 运行客户端数与隐私预算扫描实验。
"""
import dataclasses
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import typer
from loguru import logger
from rich.console import Console
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn, TimeElapsedColumn
from rich.table import Table

from felb import __version__
from felb import rng
from felb.baselines import ReferenceFactorizer, RelaxedFactorizer, run_aggregated_bmf
from felb.config import ConfigManager, ExperimentConfig, Method, Rounding
from felb.errors import ShapeError
from felb.federation import RunHistory, partition_rows, run_federated
from felb.io_utils import atomic_path, write_json, write_jsonl
from felb.log import setup_logger
from felb.matrix import (
    BinaryMatrix,
    FactorMatrix,
    boolean_product,
    read_factor,
    read_matrix_market,
    write_factor,
    write_matrix_market,
)
from felb.metrics import RoundLog, f1, f1_star, hamming, integrality_gap, rmsd, summarize, write_rounds_csv
from felb.synthdata import apply_xor_noise, generate_planted, preset_spec

# 创建 Typer 应用
app = typer.Typer(
    name="felb",
    help="felb - 联邦布尔矩阵分解工具集",
    no_args_is_help=True,
    add_completion=False,
)

# 子命令组
sweep_app = typer.Typer(help="参数扫描实验", no_args_is_help=True)
app.add_typer(sweep_app, name="sweep", help="参数扫描实验")

# 创建控制台对象
console = Console()

DEFAULT_EPSILONS = "0.1,0.25,0.5,1,1.5,2"
DEFAULT_CLIENT_COUNTS = "2,4,8,16,32"
SWEPT_MECHANISMS = ("gauss", "laplace", "bernoulli")


def version_callback(value: bool):
    """版本信息回调函数"""
    if value:
        console.print(f"felb 版本: {__version__}")
        raise typer.Exit()


@app.callback()
def main(
    version: bool = typer.Option(
        False, "--version", "-v", help="显示版本信息", callback=version_callback, is_eager=True
    ),
    log_dir: Optional[Path] = typer.Option(None, "--log-dir", help="日志根目录，不指定时只输出到控制台"),
    log_level: Optional[str] = typer.Option(None, "--log-level", help="控制台日志级别（默认读取 FELB_LOG_LEVEL）"),
):
    """felb 主命令"""
    setup_logger(app_name="felb", log_dir=log_dir, level=log_level)


# ============== 配置与数据 ==============


def load_config(config: Optional[Path], overrides: Dict[str, Any]) -> Tuple[ConfigManager, ExperimentConfig]:
    """
    依次叠加 默认值 → 配置文件 → 命令行参数，再做整体校验

    Args:
        config: 用户配置文件
        overrides: 点号键到命令行取值的映射，None 表示未指定

    Returns:
        Tuple[ConfigManager, ExperimentConfig]: 合并后的管理器与类型化配置
    """
    manager = ConfigManager(config)
    for key, value in overrides.items():
        if value is not None:
            manager.set(key, value)
    return manager, ExperimentConfig.from_manager(manager)


@dataclass
class Dataset:
    data: BinaryMatrix
    mask: Optional[BinaryMatrix]


def load_dataset(cfg: ExperimentConfig, seed: int) -> Dataset:
    """按配置读取数据文件，或生成种植块数据并叠加异或噪声"""
    if cfg.data.source == "file":
        data = read_matrix_market(cfg.data.path)
        mask = read_matrix_market(cfg.data.mask) if cfg.data.mask else None
        if mask is not None and mask.shape != data.shape:
            raise ShapeError(f"掩码 {cfg.data.mask} 与数据 {cfg.data.path}", mask.shape, data.shape)
        return Dataset(data, mask)

    spec = dataclasses.replace(
        preset_spec(cfg.data.preset, cfg.federation.clients, cfg.data.planted), seed=seed
    )
    clean, mask = generate_planted(spec)
    return Dataset(apply_xor_noise(clean, cfg.data.noise, seed), mask)


def split_dataset(ds: Dataset, clients: int, seed: int) -> Tuple[List[BinaryMatrix], Optional[List[BinaryMatrix]]]:
    """数据与掩码使用同一行划分"""
    blocks = partition_rows(ds.data.rows, clients, seed)
    parts = [ds.data.take_rows(idx) for idx in blocks]
    masks = [ds.mask.take_rows(idx) for idx in blocks] if ds.mask is not None else None
    return parts, masks


# ============== 执行 ==============


@dataclass
class RunOutcome:
    """一次运行（联邦或聚合基线）的产出"""

    rounds: List[RoundLog]
    U: List[BinaryMatrix]
    v_hat: BinaryMatrix
    v_hat_real: Optional[FactorMatrix]
    final: Dict[str, Optional[float]]
    truncated: bool
    elapsed_seconds: float


def final_metrics(
    data: BinaryMatrix, mask: Optional[BinaryMatrix], recon: BinaryMatrix, v_hat: Optional[FactorMatrix]
) -> Dict[str, Optional[float]]:
    return {
        "rmsd": rmsd(data, recon),
        "f1": f1(data, recon),
        "f1_star": f1_star(mask, recon) if mask is not None else None,
        "integrality_gap": integrality_gap(v_hat) if v_hat is not None else 0.0,
    }


def _run_baseline(
    cfg: ExperimentConfig, parts: List[BinaryMatrix], masks: Optional[List[BinaryMatrix]], seed: int
) -> Tuple[List[RoundLog], List[BinaryMatrix], BinaryMatrix]:
    baseline = cfg.baseline
    if baseline.rounding is Rounding.THRESHOLD:
        algo = RelaxedFactorizer(baseline.reference)
    else:
        algo = ReferenceFactorizer(baseline.reference)
    start = time.perf_counter()
    Us, v_hat = run_aggregated_bmf(parts, algo, baseline.agg, cfg.federation.rank, seed, cfg.federation.privacy)
    recons = [boolean_product(U, v_hat) for U in Us]
    data = BinaryMatrix.vstack(parts)
    recon = BinaryMatrix.vstack(recons)
    log = RoundLog(
        round=1,
        mean_local_loss=float(np.mean([hamming(A, R) for A, R in zip(parts, recons)])),
        rmsd=rmsd(data, recon),
        f1=f1(data, recon),
        f1_star=f1_star(BinaryMatrix.vstack(masks), recon) if masks is not None else None,
        integrality_gap=0.0,
        elapsed_seconds=time.perf_counter() - start,
    )
    return [log], Us, v_hat


def run_experiment(
    cfg: ExperimentConfig, seed: int, on_round: Optional[Callable[[RoundLog], None]] = None
) -> RunOutcome:
    """
    执行一次试验：准备数据 → 划分 → 联邦分解或聚合基线 → 最终指标

    Args:
        cfg: 类型化配置
        seed: 本次试验的种子（覆盖配置中的种子）
        on_round: 每轮回调

    Returns:
        RunOutcome: 运行产出
    """
    fed = dataclasses.replace(cfg.federation, global_seed=seed)
    ds = load_dataset(cfg, seed)
    parts, masks = split_dataset(ds, fed.clients, seed)
    start = time.perf_counter()

    if cfg.method is Method.AGG_BASELINE:
        rounds, Us, v_hat = _run_baseline(dataclasses.replace(cfg, federation=fed), parts, masks, seed)
        v_hat_real = None
        truncated = False
    else:
        history: RunHistory = run_federated(parts, fed, masks=masks, on_round=on_round)
        Us, v_hat = history.rounded()
        rounds, v_hat_real, truncated = history.rounds, history.v_hat, history.truncated

    recon = BinaryMatrix.vstack([boolean_product(U, v_hat) for U in Us])
    data = BinaryMatrix.vstack(parts)
    mask = BinaryMatrix.vstack(masks) if masks is not None else None
    return RunOutcome(
        rounds=rounds,
        U=Us,
        v_hat=v_hat,
        v_hat_real=v_hat_real,
        final=final_metrics(data, mask, recon, v_hat_real),
        truncated=truncated,
        elapsed_seconds=time.perf_counter() - start,
    )


def trial_seed(seed: int, trial: int) -> int:
    """第 0 次试验直接使用配置种子，其余试验派生独立种子"""
    return seed if trial == 0 else rng.derive_seed(seed, trial)


def _finite_or_none(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_run_outputs(
    out: Path, outcome: RunOutcome, manager: ConfigManager, cfg: ExperimentConfig, seed: int
) -> None:
    """写出 history.csv、vhat.mtx、u_<i>.mtx 与 summary.json"""
    out.mkdir(parents=True, exist_ok=True)
    write_rounds_csv(outcome.rounds, out / "history.csv", cfg.experiment.record_timing)
    write_matrix_market(out / "vhat.mtx", outcome.v_hat)
    if outcome.v_hat_real is not None:
        write_factor(out / "vhat.fac", outcome.v_hat_real)
    for i, U in enumerate(outcome.U):
        write_matrix_market(out / f"u_{i}.mtx", U)

    config_echo = manager.as_dict()
    config_echo["federation"]["seed"] = str(seed)
    last = summarize(outcome.rounds)
    rule = cfg.federation.rule
    summary = {
        "version": __version__,
        "method": cfg.method.value,
        "seed": seed,
        "config": config_echo,
        "step_rule": {"variant": rule.variant.value, "inertia_beta": rule.inertia_beta, "mu_epsilon": rule.mu_epsilon},
        "final": {k: _finite_or_none(v) for k, v in outcome.final.items()},
        "rounds": len(outcome.rounds),
        "truncated": outcome.truncated,
        "global_objective": _finite_or_none(last.get("global_objective")),
        "timing": {
            "elapsed_seconds": outcome.elapsed_seconds,
            "per_round": [r.elapsed_seconds for r in outcome.rounds],
        },
    }
    write_json(out / "summary.json", summary)


def _round_progress() -> Progress:
    return Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TextColumn("[progress.percentage]{task.percentage:>3.0f}%"),
        TimeElapsedColumn(),
        console=console,
        transient=True,
    )


def _metrics_table(title: str, final: Dict[str, Optional[float]], metrics: Sequence[str]) -> Table:
    table = Table(title=title)
    table.add_column("指标", style="cyan")
    table.add_column("值", justify="right", style="green")
    for name in metrics:
        value = final.get(name)
        table.add_row(name, "-" if value is None else f"{value:.6g}")
    return table


# ============== 子命令 ==============


@app.command("generate")
def cmd_generate(
    out: Path = typer.Option(Path("data"), "--out", "-o", help="输出目录"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="配置文件"),
    seed: Optional[int] = typer.Option(None, "--seed", help="随机种子"),
    rows: Optional[int] = typer.Option(None, "--rows", help="行数"),
    cols: Optional[int] = typer.Option(None, "--cols", help="列数"),
    tiles: Optional[int] = typer.Option(None, "--tiles", help="种植块个数"),
    tile_rows: Optional[int] = typer.Option(None, "--tile-rows", help="块行数（0 为 rows/(2·tiles)）"),
    tile_cols: Optional[int] = typer.Option(None, "--tile-cols", help="块列数（0 为 cols/(2·tiles)）"),
    density: Optional[float] = typer.Option(None, "--density", help="块内 1 的密度"),
    background: Optional[float] = typer.Option(None, "--background", help="背景 1 的密度"),
    noise: Optional[float] = typer.Option(None, "--noise", help="异或噪声翻转概率"),
    preset: Optional[str] = typer.Option(None, "--preset", help="数据规模设定 none|scarcity|abundance"),
    clients: Optional[int] = typer.Option(None, "--clients", help="客户端数（abundance 设定按此缩放行数）"),
):
    """生成种植块合成数据：data.mtx、mask.mtx 与 spec.jsonl"""
    manager, cfg = load_config(
        config,
        {
            "federation.seed": seed,
            "data.rows": rows,
            "data.cols": cols,
            "data.tiles": tiles,
            "data.tile_rows": tile_rows,
            "data.tile_cols": tile_cols,
            "data.tile_density": density,
            "data.background_density": background,
            "data.noise": noise,
            "data.preset": preset,
            "federation.clients": clients,
        },
    )
    global_seed = cfg.federation.global_seed
    spec = dataclasses.replace(
        preset_spec(cfg.data.preset, cfg.federation.clients, cfg.data.planted), seed=global_seed
    )
    clean, mask = generate_planted(spec)
    data = apply_xor_noise(clean, cfg.data.noise, global_seed)

    out.mkdir(parents=True, exist_ok=True)
    write_matrix_market(out / "data.mtx", data)
    write_matrix_market(out / "mask.mtx", mask)
    write_jsonl(
        out / "spec.jsonl",
        [
            {
                "version": __version__,
                "spec": spec.to_record(),
                "noise": cfg.data.noise.p,
                "preset": cfg.data.preset.value,
            }
        ],
    )
    logger.info(f"已生成 {data.rows}×{data.cols} 数据，密度 {data.density:.4f}")
    console.print(f"[green]✅ 已写出 data.mtx / mask.mtx / spec.jsonl 到 {out}[/green]")


@app.command("run")
def cmd_run(
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="配置文件"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="输出目录（默认 experiment.output_dir）"),
    seed: Optional[int] = typer.Option(None, "--seed", help="随机种子"),
    method: Optional[str] = typer.Option(None, "--method", "-m", help="felb | felb-mu | agg-baseline"),
    agg: Optional[str] = typer.Option(None, "--agg", help="聚合基线的聚合函数 avg | vote | or"),
    clients: Optional[int] = typer.Option(None, "--clients", help="客户端数"),
    sync_interval: Optional[int] = typer.Option(None, "--sync-interval", help="同步间隔 b"),
    iterations: Optional[int] = typer.Option(None, "--iterations", help="全局轮数 T"),
    privacy: Optional[str] = typer.Option(None, "--privacy", help="none | gauss | laplace | bernoulli"),
    epsilon: Optional[float] = typer.Option(None, "--epsilon", help="隐私预算 ε"),
    delta: Optional[float] = typer.Option(None, "--delta", help="高斯机制的 δ"),
    theta: Optional[float] = typer.Option(None, "--theta", help="裁剪阈值 θ（指定即开启裁剪）"),
):
    """执行 FELB / FELB-MU 或聚合基线，写出历史、因子与摘要"""
    manager, cfg = load_config(
        config,
        {
            "federation.seed": seed,
            "federation.method": method,
            "baseline.agg": agg,
            "federation.clients": clients,
            "federation.sync_interval": sync_interval,
            "federation.max_iterations": iterations,
            "privacy.mechanism": privacy,
            "privacy.epsilon": epsilon,
            "privacy.delta": delta,
            "privacy.clip_theta": theta,
            "privacy.clipped": True if theta is not None else None,
        },
    )
    out = out or cfg.experiment.output_dir
    trials = cfg.experiment.trials

    for trial in range(trials):
        run_seed = trial_seed(cfg.federation.global_seed, trial)
        target = out if trials == 1 else out / f"trial_{trial}"
        total = cfg.federation.max_iterations if cfg.method is not Method.AGG_BASELINE else 1
        with _round_progress() as progress:
            task = progress.add_task(f"试验 {trial + 1}/{trials} ({cfg.method.value})", total=total)
            outcome = run_experiment(cfg, run_seed, on_round=lambda _log: progress.advance(task))
        write_run_outputs(target, outcome, manager, cfg, run_seed)

        if outcome.truncated:
            console.print("[yellow]⚠️  运行超出时间预算，结果已截断[/yellow]")
        title = f"试验 {trial + 1} 最终指标 (seed={run_seed})"
        console.print(_metrics_table(title, outcome.final, cfg.experiment.metrics))
        console.print(f"[green]✅ 结果已写入 {target}[/green]")


@app.command("evaluate")
def cmd_evaluate(
    reconstruction: Path = typer.Argument(..., help="重构矩阵 .mtx"),
    reference: Path = typer.Argument(..., help="参考数据 .mtx"),
    mask: Optional[Path] = typer.Option(None, "--mask", help="真值掩码 .mtx（计算 F1*）"),
    factor: Optional[Path] = typer.Option(None, "--factor", help="实值因子转储（计算整数性间隙）"),
    csv: Optional[Path] = typer.Option(None, "--csv", help="同时把结果写成 CSV"),
):
    """比较重构与参考矩阵：RMSD、F1、F1*、整数性间隙"""
    recon = read_matrix_market(reconstruction)
    ref = read_matrix_market(reference)
    if recon.shape != ref.shape:
        raise ShapeError(f"{reconstruction} 与 {reference}", recon.shape, ref.shape)
    truth = read_matrix_market(mask) if mask is not None else None
    if truth is not None and truth.shape != ref.shape:
        raise ShapeError(f"{mask} 与 {reference}", truth.shape, ref.shape)
    gap_source = read_factor(factor) if factor is not None else recon.to_dense().astype(np.float64)

    final = {
        "rmsd": rmsd(ref, recon),
        "f1": f1(ref, recon),
        "f1_star": f1_star(truth, recon) if truth is not None else None,
        "integrality_gap": integrality_gap(gap_source),
    }
    console.print(_metrics_table(f"{reconstruction.name} vs {reference.name}", final, list(final)))
    if csv is not None:
        with atomic_path(csv) as tmp:
            pd.DataFrame([final]).to_csv(tmp, index=False, float_format="%.9g", na_rep="")


# ============== 扫描实验 ==============


def _sweep(
    manager: ConfigManager,
    settings: Sequence[Tuple[str, Dict[str, Any]]],
    label: str,
    out: Path,
) -> pd.DataFrame:
    """对每个设定重建配置并跑全部试验，每 (设定, 试验) 写一行"""
    rows = []
    for name, overrides in settings:
        for key, value in overrides.items():
            manager.set(key, value)
        cfg = ExperimentConfig.from_manager(manager)
        for trial in range(cfg.experiment.trials):
            run_seed = trial_seed(cfg.federation.global_seed, trial)
            outcome = run_experiment(cfg, run_seed)
            logger.info(f"{label}={name} 试验 {trial}: F1={outcome.final['f1']:.4f}")
            rows.append({label: name, "trial": trial, "seed": run_seed, **outcome.final})

    frame = pd.DataFrame(rows)
    out.mkdir(parents=True, exist_ok=True)
    with atomic_path(out / f"sweep_{label}.csv") as tmp:
        frame.to_csv(tmp, index=False, float_format="%.9g", na_rep="")

    table = Table(title=f"{label} 扫描（试验均值）")
    table.add_column(label, style="cyan")
    for column in ("rmsd", "f1", "f1_star"):
        table.add_column(column, justify="right", style="green")
    means = frame.groupby(label, sort=False)[["rmsd", "f1", "f1_star"]].mean()
    for name, row in means.iterrows():
        table.add_row(str(name), *("-" if pd.isna(v) else f"{v:.4f}" for v in row))
    console.print(table)
    return frame


def _parse_list(text: str, cast: Callable[[str], Any]) -> List[Any]:
    try:
        return [cast(item.strip()) for item in text.split(",") if item.strip()]
    except ValueError:
        raise typer.BadParameter(f"无法解析列表: {text!r}") from None


@sweep_app.command("clients")
def sweep_clients(
    counts: str = typer.Option(DEFAULT_CLIENT_COUNTS, "--counts", help="逗号分隔的客户端数"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="配置文件"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="输出目录"),
    seed: Optional[int] = typer.Option(None, "--seed", help="随机种子"),
    method: Optional[str] = typer.Option(None, "--method", "-m", help="felb | felb-mu | agg-baseline"),
):
    """客户端数扫描：每个客户端数跑 experiment.trials 次"""
    manager, cfg = load_config(config, {"federation.seed": seed, "federation.method": method})
    settings = [(str(c), {"federation.clients": c}) for c in _parse_list(counts, int)]
    _sweep(manager, settings, "clients", out or cfg.experiment.output_dir)


@sweep_app.command("privacy")
def sweep_privacy(
    epsilons: str = typer.Option(DEFAULT_EPSILONS, "--epsilons", help="逗号分隔的 ε"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="配置文件"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="输出目录"),
    seed: Optional[int] = typer.Option(None, "--seed", help="随机种子"),
    method: Optional[str] = typer.Option(None, "--method", "-m", help="felb | felb-mu | agg-baseline"),
    privacy: Optional[str] = typer.Option(None, "--privacy", help="只扫描该机制（默认三种全部）"),
):
    """隐私预算扫描：每种机制、每个 ε 跑 experiment.trials 次"""
    manager, cfg = load_config(
        config, {"federation.seed": seed, "federation.method": method, "privacy.mechanism": privacy}
    )
    chosen = cfg.federation.privacy
    mechanisms = [chosen.mechanism.value] if chosen.enabled else list(SWEPT_MECHANISMS)
    settings = [
        (f"{mech}@{eps:g}", {"privacy.mechanism": mech, "privacy.epsilon": eps})
        for mech in mechanisms
        for eps in _parse_list(epsilons, float)
    ]
    _sweep(manager, settings, "privacy", out or cfg.experiment.output_dir)


if __name__ == "__main__":
    app()
