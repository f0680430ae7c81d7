"""
矩阵核心模块 - 二值矩阵与实值因子矩阵

BinaryMatrix 以稀疏 CSR（等价于去重后的坐标集合）保存 0/1 数据；
FactorMatrix 就是行主序的 float64 numpy 数组，存放松弛后的因子。
"""
import math
from pathlib import Path
from typing import Iterable, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
import scipy.io
from scipy import sparse

from .errors import ConfigError, DataError, NumericalError, ShapeError
from .io_utils import atomic_path

# 实值因子矩阵：行主序、有限的 float64 二维数组
FactorMatrix = npt.NDArray[np.float64]

# 因子矩阵二进制转储的魔数
FACTOR_MAGIC = b"FELBFAC1"

PathLike = Union[str, Path]


def _canonical(matrix) -> sparse.csr_array:
    # 规范形：无重复坐标、无显式零、索引有序、值恒为 1
    csr = sparse.csr_array(matrix).astype(np.int64)
    csr.sum_duplicates()
    csr.data = (csr.data != 0).astype(np.int8)
    csr.eliminate_zeros()
    csr.sort_indices()
    return csr


class BinaryMatrix:
    """稀疏 0/1 矩阵，值为 1 的坐标集合即其规范形式"""

    __slots__ = ("_csr",)

    def __init__(self, matrix):
        self._csr = _canonical(matrix)

    # ---------- 构造 ----------

    @classmethod
    def from_coords(cls, rows: int, cols: int, coords: Iterable[Tuple[int, int]]) -> "BinaryMatrix":
        """
        由坐标集合构造，重复坐标按集合语义合并

        Args:
            rows: 行数
            cols: 列数
            coords: (行, 列) 坐标序列

        Returns:
            BinaryMatrix: 二值矩阵
        """
        pairs = np.asarray(list(coords), dtype=np.int64).reshape(-1, 2)
        r, c = pairs[:, 0], pairs[:, 1]
        if pairs.size and (r.min() < 0 or c.min() < 0 or r.max() >= rows or c.max() >= cols):
            raise DataError(f"坐标越界: 矩阵形状为 {(rows, cols)}")
        data = np.ones(len(r), dtype=np.int8)
        return cls(sparse.coo_array((data, (r, c)), shape=(rows, cols)))

    @classmethod
    def from_dense(cls, dense: npt.ArrayLike) -> "BinaryMatrix":
        """由稠密 0/1 数组构造"""
        arr = np.asarray(dense)
        if arr.ndim != 2:
            raise DataError(f"需要二维数组，得到 ndim={arr.ndim}")
        if arr.size and not np.isin(arr, (0, 1)).all():
            raise DataError("二值矩阵只能包含 0 和 1")
        return cls(sparse.csr_array(arr.astype(np.int8)))

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "BinaryMatrix":
        return cls(sparse.csr_array((rows, cols), dtype=np.int8))

    @classmethod
    def ones(cls, rows: int, cols: int) -> "BinaryMatrix":
        return cls(sparse.csr_array(np.ones((rows, cols), dtype=np.int8)))

    @staticmethod
    def vstack(blocks: Sequence["BinaryMatrix"]) -> "BinaryMatrix":
        """纵向拼接多个块（列数必须一致）"""
        if not blocks:
            raise DataError("无法拼接空列表")
        cols = {b.cols for b in blocks}
        if len(cols) > 1:
            raise ShapeError("vstack", blocks[0].shape, next(b.shape for b in blocks if b.cols != blocks[0].cols))
        return BinaryMatrix(sparse.vstack([b._csr for b in blocks], format="csr"))

    # ---------- 属性 ----------

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(int(s) for s in self._csr.shape)

    @property
    def rows(self) -> int:
        return self.shape[0]

    @property
    def cols(self) -> int:
        return self.shape[1]

    @property
    def nnz(self) -> int:
        return int(self._csr.nnz)

    @property
    def density(self) -> float:
        cells = self.rows * self.cols
        return self.nnz / cells if cells else 0.0

    @property
    def csr(self) -> sparse.csr_array:
        """只读的 CSR 视图，调用方不得修改"""
        return self._csr

    # ---------- 转换 ----------

    def coords(self) -> npt.NDArray[np.int64]:
        """按行主序排列的 (行, 列) 坐标，形状 (nnz, 2)"""
        coo = self._csr.tocoo()
        return np.column_stack([coo.row, coo.col]).astype(np.int64)

    def to_dense(self) -> npt.NDArray[np.uint8]:
        return self._csr.toarray().astype(np.uint8)

    def to_real(self) -> sparse.csr_array:
        """以 float64 稀疏矩阵参与数值计算"""
        return self._csr.astype(np.float64)

    def take_rows(self, index: npt.ArrayLike) -> "BinaryMatrix":
        return BinaryMatrix(self._csr[np.asarray(index, dtype=np.int64), :])

    def xor(self, other: "BinaryMatrix") -> "BinaryMatrix":
        _require_same_shape("xor", self, other)
        return BinaryMatrix(self._csr != other._csr)

    def complement(self) -> "BinaryMatrix":
        return BinaryMatrix.from_dense(1 - self.to_dense())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMatrix):
            return NotImplemented
        return self.shape == other.shape and (self._csr != other._csr).nnz == 0

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"BinaryMatrix(shape={self.shape}, nnz={self.nnz})"


def _require_same_shape(what: str, a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(what, a.shape, b.shape)


def check_finite(x: FactorMatrix, stage: str) -> FactorMatrix:
    """存在 NaN/Inf 时抛出带阶段名的 NumericalError"""
    if not np.all(np.isfinite(x)):
        raise NumericalError(stage)
    return x


def as_factor(x: npt.ArrayLike) -> FactorMatrix:
    """把任意二维数组转换为 C 连续的 float64 因子矩阵"""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"因子矩阵必须是二维的，得到 ndim={arr.ndim}")
    return arr


# ---------- 乘积与范数 ----------


def boolean_product(U: BinaryMatrix, V: BinaryMatrix) -> BinaryMatrix:
    """
    布尔矩阵乘积 [U∘V]_ij = OR_l (U_il AND V_lj)

    Args:
        U: n×k 二值矩阵
        V: k×m 二值矩阵

    Returns:
        BinaryMatrix: n×m 结果，多个 l 同时命中时仍为 1
    """
    if U.cols != V.rows:
        raise ShapeError("boolean_product", U.shape, V.shape)
    counts = U.csr.astype(np.int64) @ V.csr.astype(np.int64)
    return BinaryMatrix(counts)


def real_product(X: FactorMatrix, Y: FactorMatrix) -> FactorMatrix:
    if X.shape[1] != Y.shape[0]:
        raise ShapeError("real_product", X.shape, Y.shape)
    return np.asarray(X, dtype=np.float64) @ np.asarray(Y, dtype=np.float64)


def frobenius_sq(X: FactorMatrix) -> float:
    """元素平方和"""
    arr = np.asarray(X, dtype=np.float64)
    return float(np.vdot(arr, arr))


def spectral_norm(X: FactorMatrix, tol: float = 1e-9, max_iter: int = 1000) -> float:
    """
    幂迭代估计最大奇异值

    在较小的 Gram 矩阵（XᵀX 或 XXᵀ，二者非零特征值相同）上做幂迭代，
    起始向量为带确定性微小斜坡的全 1 向量，
    Rayleigh 商的相对变化小于 tol 时停止。

    Args:
        X: 非空实矩阵
        tol: 相对收敛阈值
        max_iter: 最大迭代次数

    Returns:
        float: 最大奇异值
    """
    if tol <= 0:
        raise ConfigError([f"spectral_norm 的 tol 必须为正，得到 {tol}"])
    arr = np.asarray(X, dtype=np.float64)
    if arr.size == 0:
        raise DataError("spectral_norm 需要非空矩阵")
    check_finite(arr, "spectral_norm")

    gram = arr.T @ arr if arr.shape[1] <= arr.shape[0] else arr @ arr.T
    if not gram.any():
        return 0.0

    n = gram.shape[0]
    v = 1.0 + np.arange(n) / (math.pi * n)
    v /= np.linalg.norm(v)
    estimate = 0.0
    for _ in range(max_iter):
        w = gram @ v
        norm_w = float(np.linalg.norm(w))
        if norm_w == 0.0:
            # 起始向量恰好落在零空间：改从对角线最大的坐标轴出发
            v = np.zeros_like(v)
            v[int(np.argmax(np.diag(gram)))] = 1.0
            continue
        rayleigh = float(v @ w)
        v = w / norm_w
        if abs(rayleigh - estimate) <= tol * abs(rayleigh):
            estimate = rayleigh
            break
        estimate = rayleigh
    return math.sqrt(max(estimate, 0.0))


# ---------- 文件格式 ----------


def read_matrix_market(path: PathLike) -> BinaryMatrix:
    """
    读取 MatrixMarket 坐标格式（pattern 或数值，非零即 1）

    Args:
        path: .mtx 文件路径

    Returns:
        BinaryMatrix: 读入的二值矩阵
    """
    try:
        loaded = scipy.io.mmread(str(path))
    except Exception as e:
        raise DataError(f"无法读取 MatrixMarket 文件 {path}: {e}") from e
    if isinstance(loaded, np.ndarray):
        return BinaryMatrix.from_dense((loaded != 0).astype(np.int8))
    return BinaryMatrix(loaded)


def write_matrix_market(path: PathLike, matrix: BinaryMatrix) -> None:
    """以 `coordinate pattern general` 格式原子写入（1 基索引）"""
    with atomic_path(path) as tmp:
        with open(tmp, "wb") as f:
            scipy.io.mmwrite(f, sparse.coo_matrix(matrix.csr), field="pattern", symmetry="general")


def write_factor(path: PathLike, X: FactorMatrix) -> None:
    """因子矩阵二进制转储：魔数 + 行数 + 列数（小端 u64）+ 小端 float64 值"""
    arr = as_factor(X)
    header = FACTOR_MAGIC + np.asarray(arr.shape, dtype="<u8").tobytes()
    with atomic_path(path) as tmp:
        with open(tmp, "wb") as f:
            f.write(header)
            f.write(arr.astype("<f8").tobytes(order="C"))


def read_factor(path: PathLike) -> FactorMatrix:
    raw = Path(path).read_bytes()
    head = len(FACTOR_MAGIC)
    if raw[:head] != FACTOR_MAGIC:
        raise DataError(f"{path} 不是因子矩阵转储文件")
    rows, cols = np.frombuffer(raw[head : head + 16], dtype="<u8")
    values = np.frombuffer(raw[head + 16 :], dtype="<f8")
    if values.size != int(rows) * int(cols):
        raise DataError(f"{path} 长度与头部声明的形状 {(int(rows), int(cols))} 不一致")
    return values.reshape(int(rows), int(cols)).astype(np.float64)


def round_to_binary(X: FactorMatrix, threshold: float = 0.5) -> BinaryMatrix:
    """按阈值取整：x ≥ threshold 记为 1"""
    return BinaryMatrix.from_dense((np.asarray(X) >= threshold).astype(np.int8))
