"""Declarative experiment configuration.

Configs are YAML or JSON key trees mapped onto dataclasses.  Unknown keys
are errors, and ``schema_version`` must match :data:`SCHEMA_VERSION`.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError
from .oracle import ResponsePolicy
from .strategies import STRATEGIES, AdversarialConfig, ratio_counts
from .trainer.augment import AugmentConfig
from .trainer.mixmatch import MixMatchConfig
from .trainer.optim import OPTIMIZERS, OptimizerConfig

SCHEMA_VERSION = 1


@dataclass
class VictimConfig:
    dataset: str = "digits"
    architecture: str = "small_cnn"
    width: int = 32
    checkpoint: str | None = None  # loaded when present, otherwise written after training
    train_epochs: int = 60
    seed: int = 1234
    version: str | None = None


@dataclass
class StrategyConfig:
    name: str = "basic"
    ratio: tuple[int, int] = (1, 1)  # adversarial : clean
    adversarial: AdversarialConfig = field(default_factory=AdversarialConfig)


@dataclass
class BudgetConfig:
    batches: int = 16
    batch_size: int = 64


@dataclass
class TrainerConfig:
    architecture: str = "tiny_cnn"
    width: int = 32
    init: str = "scratch"
    pretrained_source: str | None = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 200
    round_epochs: int = 0  # warm-start epochs after each round; 0 trains only at the end
    batch_size: int = 64
    augment: AugmentConfig = field(default_factory=lambda: AugmentConfig(enabled=False))
    mixmatch: bool = False
    mixmatch_config: MixMatchConfig = field(default_factory=MixMatchConfig)


@dataclass
class EvaluationConfig:
    policy: dict = field(default_factory=lambda: {"kind": "full"})
    adversarial_fidelity: bool = False
    adversarial: AdversarialConfig = field(default_factory=AdversarialConfig)
    datasets: list[str] = field(default_factory=list)  # extra datasets for the transfer matrix


@dataclass
class GatewayTarget:
    endpoint: str
    key: str
    eval_key: str | None = None


@dataclass
class AttackConfig:
    schema_version: int = SCHEMA_VERSION
    name: str = "experiment"
    victim: VictimConfig = field(default_factory=VictimConfig)
    policy: dict = field(default_factory=lambda: {"kind": "full"})
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    split_fraction: float = 0.8
    split_seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str | None = None
    cache_path: str | None = None
    gateway: GatewayTarget | None = None

    def __post_init__(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {self.schema_version} unsupported (expected {SCHEMA_VERSION})")
        if not self.seeds:
            raise ConfigError("seed list must be non-empty")
        if self.budget.batches < 0 or self.budget.batch_size < 1:
            raise ConfigError("budget must be non-negative with a positive batch size")
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError("split_fraction must lie in (0, 1)")
        if self.strategy.name not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy.name!r}; expected one of {STRATEGIES}")
        if self.trainer.optimizer.name not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.trainer.optimizer.name!r}")
        if self.strategy.name == "mixed" or self.strategy.name.startswith("adversarial"):
            try:
                ratio_counts(self.strategy.ratio, self.budget.batch_size)
            except ValueError as e:
                raise ConfigError(str(e)) from e
        try:
            self.response_policy
            ResponsePolicy.from_dict(self.evaluation.policy)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    @property
    def response_policy(self) -> ResponsePolicy:
        return ResponsePolicy.from_dict(self.policy)

    @property
    def strategy_label(self) -> str:
        s = self.strategy.name
        if s == "mixed" or s.startswith("adversarial"):
            s = f"{s}({self.strategy.ratio[0]}:{self.strategy.ratio[1]})"
        return s + ("+mixmatch" if self.trainer.mixmatch else "")

    def to_dict(self) -> dict:
        return to_dict(self)

    def replace(self, **changes) -> "AttackConfig":
        return from_dict(AttackConfig, _merge(self.to_dict(), changes))


def _merge(base: dict, changes: Mapping[str, Any]) -> dict:
    out = dict(base)
    for k, v in changes.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def to_dict(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    return obj


def _convert(tp: Any, value: Any, where: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, where)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, Mapping):
            raise ConfigError(f"{where}: expected a mapping")
        return from_dict(tp, value, where)
    if origin is tuple:
        return tuple(_convert(a, v, where) for a, v in zip(args, value))
    if origin is list:
        return [_convert(args[0], v, where) for v in value]
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp is int and isinstance(value, bool):
        raise ConfigError(f"{where}: expected an integer")
    if tp in (int, str, bool) and not isinstance(value, tp):
        raise ConfigError(f"{where}: expected {tp.__name__}, got {value!r}")
    return value


def from_dict(cls: type, data: Mapping[str, Any], where: str = "config") -> Any:
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {k: _convert(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def load_config(path: str | Path) -> AttackConfig:
    path = Path(path)
    try:
        text = path.read_text()
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (OSError, yaml.YAMLError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(AttackConfig, data)


@dataclass
class AccountConfig:
    key: str
    policy: dict = field(default_factory=lambda: {"kind": "full"})
    rate_limit: float = 1000.0
    burst: float | None = None


@dataclass
class GatewayConfig:
    """Declarative file for ``mextract serve``."""

    schema_version: int = SCHEMA_VERSION
    bind: str = "127.0.0.1:8080"
    victim: VictimConfig = field(default_factory=VictimConfig)
    split_fraction: float = 0.8
    split_seed: int = 0
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    eval_budget: BudgetConfig = field(default_factory=lambda: BudgetConfig(batches=64))
    accounts: list[AccountConfig] = field(default_factory=list)
    cache_path: str | None = None
    log_path: str | None = None

    def __post_init__(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {self.schema_version} unsupported")
        if not self.accounts:
            raise ConfigError("gateway needs at least one account")
        host, sep, port = self.bind.rpartition(":")
        if not sep or not port.isdigit():
            raise ConfigError(f"bind must be host:port, got {self.bind!r}")
        try:
            for a in self.accounts:
                ResponsePolicy.from_dict(a.policy)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    @property
    def address(self) -> tuple[str, int]:
        host, _, port = self.bind.rpartition(":")
        return host, int(port)


def load_gateway_config(path: str | Path) -> GatewayConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read gateway config {path}: {e}") from e
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(GatewayConfig, data)
