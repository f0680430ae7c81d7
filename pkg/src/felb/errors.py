"""
异常模块 - 工具集内所有错误的统一层级

每个异常携带 exit_code，命令行入口据此返回进程退出码：
0 成功，2 配置错误，3 数据错误，4 数值失败。
"""
from typing import Iterable, List, Optional


class FelbError(Exception):
    """工具集异常基类"""

    exit_code = 1


class ConfigError(FelbError, ValueError):
    """配置校验失败，violations 列出所有违规项"""

    exit_code = 2

    def __init__(self, violations: Iterable[str]):
        self.violations: List[str] = list(violations)
        super().__init__("配置无效:\n" + "\n".join(f"  - {v}" for v in self.violations))


class DataError(FelbError, ValueError):
    """数据文件不可读、格式错误或数据不满足前置条件"""

    exit_code = 3


class ShapeError(DataError):
    """矩阵维度不匹配"""

    def __init__(self, what: str, left: tuple, right: tuple):
        self.left = tuple(left)
        self.right = tuple(right)
        super().__init__(f"{what}: 维度不匹配 {self.left} 与 {self.right}")


class NumericalError(FelbError, ArithmeticError):
    """出现 NaN/Inf 等非有限数值

    stage 为出错的计算阶段名，round/client 由编排器补充。
    """

    exit_code = 4

    def __init__(
        self,
        stage: str,
        message: str = "出现非有限数值",
        round: Optional[int] = None,
        client: Optional[int] = None,
    ):
        self.stage = stage
        self.message = message
        self.round = round
        self.client = client
        super().__init__(self._format())

    def _format(self) -> str:
        where = [f"阶段={self.stage}"]
        if self.round is not None:
            where.append(f"轮次={self.round}")
        if self.client is not None:
            where.append(f"客户端={self.client}")
        return f"{self.message} ({', '.join(where)})"

    def with_context(self, round: Optional[int] = None, client: Optional[int] = None) -> "NumericalError":
        """返回补充了轮次/客户端上下文的新异常"""
        return NumericalError(
            self.stage,
            self.message,
            round=self.round if round is None else round,
            client=self.client if client is None else client,
        )


class LocalSolverError(FelbError):
    """本地 BMF 求解器失败"""

    exit_code = 4

    def __init__(self, client: int, cause: BaseException):
        self.client = client
        self.cause = cause
        super().__init__(f"客户端 {client} 的本地分解失败: {cause}")
