"""
felb - 命令行入口模块

把 Typer 应用包装成返回退出码的 main，统一处理工具集异常：
0 成功，1 其他错误，2 配置错误，3 数据错误，4 数值失败。
"""
import sys
from typing import List, Optional

import click
from loguru import logger
from rich.console import Console

from felb.cli import app
from felb.errors import ConfigError, FelbError

console = Console(stderr=True)


def main(argv: Optional[List[str]] = None) -> int:
    """命令行主入口点

    Args:
        argv: 参数列表，默认取 sys.argv[1:]

    Returns:
        int: 进程退出码
    """
    try:
        result = app(args=argv if argv is not None else sys.argv[1:], standalone_mode=False)
        return result if isinstance(result, int) else 0
    except ConfigError as e:
        console.print("[red]❌ 配置无效:[/red]")
        for violation in e.violations:
            console.print(f"[red]  - {violation}[/red]")
        logger.error(f"配置无效: {e.violations}")
        return e.exit_code
    except FelbError as e:
        console.print(f"[red]❌ {e}[/red]")
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except click.exceptions.Abort:
        console.print("\n操作被用户中断")
        return 1
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except KeyboardInterrupt:
        console.print("\n操作被用户中断")
        return 1


if __name__ == "__main__":
    sys.exit(main())
