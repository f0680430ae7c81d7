"""
felb - 联邦布尔矩阵分解工具集

客户端本地做近端交替更新，服务端做近端平均聚合，可选差分隐私加噪。
"""

__version__ = "0.1.0"

# 导出版本信息
__all__ = ["__version__"]
