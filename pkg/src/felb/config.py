"""
配置管理模块
负责加载、合并和校验实验配置

配置文件为 INI 格式（[section] + key = value），先读取包内 config.ini
默认值，再叠加用户文件；命令行参数通过 ConfigManager.set 最后覆盖。
"""
import configparser
import io
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, TypeVar, Union

from loguru import logger

from .baselines import AggFunction, ReferenceSettings
from .client import StepRule, StepVariant
from .errors import ConfigError
from .federation import FederationConfig, scalar_violations
from .io_utils import write_text_atomic
from .privacy import Mechanism, PrivacyConfig
from .proximal import ProximityParams, RegularizationParams
from .synthdata import NoiseLevel, PlantedSpec, Preset

DEFAULT_CONFIG_PATH = Path(__file__).parent / "config.ini"

KNOWN_METRICS = ("rmsd", "f1", "f1_star", "integrality_gap")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}

T = TypeVar("T")


class Method(str, Enum):
    """运行方法"""

    FELB = "felb"
    FELB_MU = "felb-mu"
    AGG_BASELINE = "agg-baseline"


class Rounding(str, Enum):
    """聚合基线本地求解器的取整方式"""

    HALF = "half"
    THRESHOLD = "threshold"


def parse_bool(value: str) -> bool:
    text = str(value).strip().lower()
    if text in _TRUE:
        return True
    if text in _FALSE:
        return False
    raise ValueError(f"无法解析为布尔值: {value!r}")


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return str(value.value)
    if value is None:
        return ""
    return str(value)


class ConfigManager:
    """配置管理器"""

    def __init__(self, config_path: Optional[Union[str, Path]] = None):
        """
        初始化配置管理器

        Args:
            config_path: 用户配置文件路径，为空时只使用包内默认值
        """
        self.config_path = Path(config_path) if config_path else None
        self.parser = self._load_defaults()
        if self.config_path is not None:
            if not self.config_path.exists():
                raise ConfigError([f"配置文件不存在: {self.config_path}"])
            self._merge(self.config_path.read_text(encoding="utf-8"), str(self.config_path))
            logger.debug(f"已加载配置文件: {self.config_path}")

    @classmethod
    def from_text(cls, text: str) -> "ConfigManager":
        """由 INI 文本构造（叠加在默认值之上）"""
        manager = cls()
        manager._merge(text, "<text>")
        return manager

    @staticmethod
    def _load_defaults() -> configparser.ConfigParser:
        parser = configparser.ConfigParser(interpolation=None)
        parser.read(DEFAULT_CONFIG_PATH, encoding="utf-8")
        return parser

    def _merge(self, text: str, source: str) -> None:
        user = configparser.ConfigParser(interpolation=None)
        try:
            user.read_string(text, source=source)
        except configparser.Error as e:
            raise ConfigError([f"配置文件解析失败: {e}"]) from e

        # 未知的节或键多半是拼写错误，一次性全部报出
        problems = []
        for section in user.sections():
            if not self.parser.has_section(section):
                problems.append(f"未知配置节 [{section}]")
                continue
            for key, value in user.items(section, raw=True):
                if not self.parser.has_option(section, key):
                    problems.append(f"未知配置键 {section}.{key}")
                else:
                    self.parser.set(section, key, value)
        if problems:
            raise ConfigError(problems)

    def get(self, key: str, default: Optional[str] = None) -> Optional[str]:
        """
        获取配置值

        Args:
            key: 点号分隔的键 (例如: 'federation.clients')
            default: 默认值

        Returns:
            原始字符串值
        """
        section, _, option = key.partition(".")
        if not self.parser.has_option(section, option):
            return default
        return self.parser.get(section, option)

    def set(self, key: str, value: Any) -> None:
        """设置配置值，键必须已存在于默认配置中"""
        section, _, option = key.partition(".")
        if not self.parser.has_option(section, option):
            raise ConfigError([f"未知配置键 {key}"])
        self.parser.set(section, option, _format_value(value))

    def as_dict(self) -> Dict[str, Dict[str, str]]:
        return {s: dict(self.parser.items(s, raw=True)) for s in self.parser.sections()}

    def dumps(self) -> str:
        buffer = io.StringIO()
        self.parser.write(buffer)
        return buffer.getvalue()

    def save(self, path: Optional[Union[str, Path]] = None) -> Path:
        """
        保存合并后的完整配置

        Returns:
            Path: 实际写入的路径
        """
        target = Path(path) if path else self.config_path
        if target is None:
            raise ConfigError(["未指定配置保存路径"])
        write_text_atomic(target, self.dumps())
        logger.info(f"配置已保存到: {target}")
        return target


class _Reader:
    # 逐键读取并转换，转换失败时记录问题并返回缺省值，最后统一报错

    def __init__(self, manager: ConfigManager):
        self.manager = manager
        self.problems: List[str] = []

    def _convert(self, key: str, fn: Callable[[str], T], fallback: T) -> T:
        raw = self.manager.get(key)
        if raw is None:
            self.problems.append(f"缺少配置键 {key}")
            return fallback
        try:
            return fn(raw.strip())
        except (ValueError, ConfigError) as e:
            self.problems.append(f"{key} = {raw!r} 无效: {e}")
            return fallback

    def text(self, key: str) -> str:
        return self._convert(key, lambda s: s, "")

    def integer(self, key: str, fallback: int = 0) -> int:
        return self._convert(key, int, fallback)

    def real(self, key: str, fallback: float = 0.0) -> float:
        return self._convert(key, float, fallback)

    def flag(self, key: str) -> bool:
        return self._convert(key, parse_bool, False)

    def enum(self, key: str, parse: Callable[[str], T], fallback: T) -> T:
        return self._convert(key, parse, fallback)

    def build(self, what: str, factory: Callable[[], T]) -> Optional[T]:
        try:
            return factory()
        except ConfigError as e:
            self.problems.extend(e.violations)
            return None
        except (TypeError, ValueError) as e:
            self.problems.append(f"{what}: {e}")
            return None


def _parse_enum(enum_cls):
    def parse(value: str):
        try:
            return enum_cls(value.lower())
        except ValueError:
            raise ValueError(f"可选值 {[m.value for m in enum_cls]}") from None

    return parse


@dataclass(frozen=True)
class DataSettings:
    """数据来源设置"""

    source: str = "generate"
    path: Optional[Path] = None
    mask: Optional[Path] = None
    planted: PlantedSpec = field(default_factory=PlantedSpec)
    noise: NoiseLevel = field(default_factory=NoiseLevel)
    preset: Preset = Preset.NONE


@dataclass(frozen=True)
class BaselineSettings:
    agg: AggFunction = AggFunction.VOTE
    rounding: Rounding = Rounding.HALF
    reference: ReferenceSettings = field(default_factory=ReferenceSettings)


@dataclass(frozen=True)
class ExperimentSettings:
    trials: int = 1
    output_dir: Path = Path("runs")
    record_timing: bool = False
    metrics: Tuple[str, ...] = KNOWN_METRICS


@dataclass(frozen=True)
class ExperimentConfig:
    """一次实验的全部类型化配置"""

    method: Method
    data: DataSettings
    federation: FederationConfig
    baseline: BaselineSettings
    experiment: ExperimentSettings

    @classmethod
    def from_manager(cls, manager: ConfigManager) -> "ExperimentConfig":
        """
        从 ConfigManager 构造并校验，所有违规项一次性通过 ConfigError 报出

        Args:
            manager: 已合并文件与命令行覆盖的配置管理器

        Returns:
            ExperimentConfig: 类型化配置
        """
        r = _Reader(manager)

        method = r.enum("federation.method", _parse_enum(Method), Method.FELB)
        seed = r.integer("federation.seed")
        if not 0 <= seed < 2**64:
            r.problems.append(f"federation.seed 必须是 64 位无符号整数，得到 {seed}")

        source = r.text("data.source")
        if source not in ("generate", "file"):
            r.problems.append(f"data.source 必须是 generate 或 file，得到 {source!r}")
        path = r.text("data.path") or None
        mask = r.text("data.mask") or None
        if source == "file" and path is None:
            r.problems.append("data.source = file 时必须给出 data.path")
        preset = r.enum("data.preset", _parse_enum(Preset), Preset.NONE)
        planted = r.build(
            "data",
            lambda: PlantedSpec(
                rows=r.integer("data.rows", 1),
                cols=r.integer("data.cols", 1),
                tiles=r.integer("data.tiles"),
                tile_rows=r.integer("data.tile_rows"),
                tile_cols=r.integer("data.tile_cols"),
                tile_density=r.real("data.tile_density", 1.0),
                background_density=r.real("data.background_density"),
                seed=seed,
            ),
        )
        noise = r.build("data.noise", lambda: NoiseLevel(r.real("data.noise")))

        reg = r.build(
            "regularization",
            lambda: RegularizationParams(
                kappa=r.real("regularization.kappa"),
                lam=r.real("regularization.lambda"),
                growth=r.real("regularization.growth", 1.0),
            ),
        )
        prox = r.build("proximity", lambda: ProximityParams(gamma=r.real("proximity.gamma")))
        variant = StepVariant.MULTIPLICATIVE if method is Method.FELB_MU else StepVariant.LIPSCHITZ
        rule = r.build(
            "step",
            lambda: StepRule(
                variant=variant,
                inertia_beta=r.real("step.inertia_beta"),
                mu_epsilon=r.real("step.mu_epsilon", 1e-12),
            ),
        )
        privacy = r.build(
            "privacy",
            lambda: PrivacyConfig(
                mechanism=r.enum("privacy.mechanism", Mechanism.parse, Mechanism.NONE),
                epsilon=r.real("privacy.epsilon", 1.0),
                delta=r.real("privacy.delta", 0.05),
                clip_theta=r.real("privacy.clip_theta", 2.0),
                sensitivity=r.real("privacy.sensitivity", 1.0),
                clipped=r.flag("privacy.clipped"),
            ),
        )
        clients = r.integer("federation.clients", 1)
        rank = r.integer("federation.rank", 1)
        sync_interval = r.integer("federation.sync_interval", 1)
        max_iterations = r.integer("federation.max_iterations")
        time_limit = r.real("federation.time_limit")
        weighted_mean = r.flag("federation.weighted_mean")
        scalar_problems = scalar_violations(clients, rank, sync_interval, max_iterations, time_limit)
        r.problems.extend(scalar_problems)

        federation = None
        if not scalar_problems and None not in (reg, prox, rule, privacy):
            federation = r.build(
                "federation",
                lambda: FederationConfig(
                    clients=clients,
                    rank=rank,
                    sync_interval=sync_interval,
                    max_iterations=max_iterations,
                    reg=reg,
                    prox=prox,
                    rule=rule,
                    privacy=privacy,
                    global_seed=seed,
                    weighted_mean=weighted_mean,
                    time_limit=time_limit,
                ),
            )

        def reference() -> ReferenceSettings:
            return ReferenceSettings(
                iterations=r.integer("baseline.local_iterations"),
                reg=RegularizationParams(
                    kappa=r.real("baseline.kappa"),
                    lam=r.real("baseline.lambda"),
                    growth=r.real("baseline.growth", 1.0),
                ),
                rule=StepRule(inertia_beta=r.real("baseline.inertia_beta")),
            )

        baseline = r.build(
            "baseline",
            lambda: BaselineSettings(
                agg=r.enum("baseline.agg", _parse_enum(AggFunction), AggFunction.VOTE),
                rounding=r.enum("baseline.rounding", _parse_enum(Rounding), Rounding.HALF),
                reference=reference(),
            ),
        )

        trials = r.integer("experiment.trials", 1)
        if trials < 1:
            r.problems.append(f"experiment.trials 必须 ≥ 1，得到 {trials}")
        metrics = tuple(m.strip() for m in r.text("experiment.metrics").split(",") if m.strip())
        unknown = [m for m in metrics if m not in KNOWN_METRICS]
        if unknown:
            r.problems.append(f"experiment.metrics 含未知指标 {unknown}，可选 {list(KNOWN_METRICS)}")
        experiment = ExperimentSettings(
            trials=trials,
            output_dir=Path(r.text("experiment.output_dir") or "runs"),
            record_timing=r.flag("experiment.record_timing"),
            metrics=metrics,
        )

        if r.problems:
            raise ConfigError(r.problems)
        return cls(
            method=method,
            data=DataSettings(
                source=source,
                path=Path(path) if path else None,
                mask=Path(mask) if mask else None,
                planted=planted,
                noise=noise,
                preset=preset,
            ),
            federation=federation,
            baseline=baseline,
            experiment=experiment,
        )
