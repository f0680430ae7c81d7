"""
合成数据模块 - 带种植稠密块的二值基准矩阵与异或噪声

背景单元格服从 Bernoulli(background_density)；每个块是随机偏移处的连续
行×列矩形，块内单元格服从 Bernoulli(tile_density)。真值掩码标记全部块单元格。
"""
import dataclasses
from dataclasses import dataclass
from enum import Enum
from typing import List, Tuple

import numpy as np
from loguru import logger

from . import rng
from .errors import ConfigError
from .matrix import BinaryMatrix

SCARCITY_TOTAL_ROWS = 2**16
ABUNDANCE_ROWS_PER_CLIENT = 500
DEFAULT_COLS = 100


class Preset(str, Enum):
    """两种数据规模设定"""

    NONE = "none"
    SCARCITY = "scarcity"
    ABUNDANCE = "abundance"


@dataclass(frozen=True)
class PlantedSpec:
    """
    种植块生成参数

    tile_rows/tile_cols 为 0 时取 rows/(2·tiles) 与 cols/(2·tiles)。
    块之间可以重叠，偏移相互独立。
    """

    rows: int = 500
    cols: int = DEFAULT_COLS
    tiles: int = 5
    tile_rows: int = 0
    tile_cols: int = 0
    tile_density: float = 0.9
    background_density: float = 0.0
    seed: int = 0

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ConfigError(problems)

    def violations(self) -> List[str]:
        problems = []
        if self.rows < 1 or self.cols < 1:
            problems.append(f"数据尺寸必须为正，得到 {self.rows}×{self.cols}")
        if self.tiles < 0:
            problems.append(f"data.tiles 不能为负，得到 {self.tiles}")
        if self.tile_rows < 0 or self.tile_cols < 0:
            problems.append("data.tile_rows/tile_cols 不能为负")
        if not 0 < self.tile_density <= 1:
            problems.append(f"data.tile_density 必须在 (0,1] 内，得到 {self.tile_density}")
        if not 0 <= self.background_density < 0.5:
            problems.append(f"data.background_density 必须在 [0,0.5) 内，得到 {self.background_density}")
        if not problems and self.tiles > 0:
            tr, tc = self.tile_extent
            if tr > self.rows or tc > self.cols:
                problems.append(f"块尺寸 {tr}×{tc} 超出矩阵尺寸 {self.rows}×{self.cols}")
        return problems

    @property
    def tile_extent(self) -> Tuple[int, int]:
        k = max(self.tiles, 1)
        tr = self.tile_rows or max(self.rows // (2 * k), 1)
        tc = self.tile_cols or max(self.cols // (2 * k), 1)
        return tr, tc

    def to_record(self) -> dict:
        record = dataclasses.asdict(self)
        record["tile_rows"], record["tile_cols"] = self.tile_extent
        return record


@dataclass(frozen=True)
class NoiseLevel:
    """异或翻转概率 p ∈ [0, 0.5]"""

    p: float = 0.0

    def __post_init__(self):
        if not 0 <= self.p <= 0.5:
            raise ConfigError([f"data.noise 必须在 [0,0.5] 内，得到 {self.p}"])


def preset_spec(preset: Preset, clients: int, base: PlantedSpec) -> PlantedSpec:
    """
    按数据规模设定调整行数

    Args:
        preset: scarcity 总行数 2^16；abundance 每个客户端 500 行
        clients: 客户端数
        base: 其余参数的来源

    Returns:
        PlantedSpec: 调整后的参数
    """
    if preset is Preset.SCARCITY:
        return dataclasses.replace(base, rows=SCARCITY_TOTAL_ROWS)
    if preset is Preset.ABUNDANCE:
        return dataclasses.replace(base, rows=ABUNDANCE_ROWS_PER_CLIENT * clients)
    return base


def generate_planted(spec: PlantedSpec) -> Tuple[BinaryMatrix, BinaryMatrix]:
    """
    生成 (数据, 真值掩码)

    Args:
        spec: 生成参数

    Returns:
        Tuple[BinaryMatrix, BinaryMatrix]: 数据矩阵与块掩码
    """
    gen = rng.generator(spec.seed, rng.Stream.PLANT)
    shape = (spec.rows, spec.cols)
    background = gen.random(shape) < spec.background_density
    mask = np.zeros(shape, dtype=bool)
    tiles = np.zeros(shape, dtype=bool)

    tr, tc = spec.tile_extent
    for _ in range(spec.tiles):
        r0 = int(gen.integers(0, spec.rows - tr + 1))
        c0 = int(gen.integers(0, spec.cols - tc + 1))
        block = (slice(r0, r0 + tr), slice(c0, c0 + tc))
        mask[block] = True
        tiles[block] |= gen.random((tr, tc)) < spec.tile_density

    data = np.where(mask, tiles, background)
    logger.debug(f"生成种植数据 {spec.rows}×{spec.cols}，{spec.tiles} 个 {tr}×{tc} 块，密度 {data.mean():.4f}")
    return BinaryMatrix.from_dense(data.astype(np.int8)), BinaryMatrix.from_dense(mask.astype(np.int8))


def apply_xor_noise(A: BinaryMatrix, level: NoiseLevel, seed: int) -> BinaryMatrix:
    """每个单元格以概率 p 独立翻转"""
    if level.p == 0:
        return A
    gen = rng.generator(seed, rng.Stream.XOR)
    flips = gen.random(A.shape) < level.p
    return A.xor(BinaryMatrix.from_dense(flips.astype(np.int8)))
