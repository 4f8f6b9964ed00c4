"""Run configuration: YAML/JSON file plus ``--set key.path=value`` overrides.

Every section maps onto a dataclass; unknown keys and mistyped values are
rejected with the offending key path. The fully resolved config (every default
filled in) is what gets echoed into output manifests.
"""

from __future__ import annotations

import dataclasses
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

import yaml

from .datasets import ClassPartition, PreprocConfig, partition_classes
from .decoder import DecoderSpec
from .distiller import DistillConfig
from .errors import ConfigError
from .evaluation import DownstreamConfig
from .federated import ExpertPlan, FederatedPlan
from .nets import ARCHITECTURES

DATA_ROOT_ENV = "PRIORDISTILL_DATA_ROOT"


@dataclass
class DatasetSection:
    name: str = "digits"
    root: str | None = None
    preproc: PreprocConfig = field(default_factory=PreprocConfig)


@dataclass
class FederatedSection:
    k: int = 2
    strategy: Literal["contiguous", "seeded-random"] = "contiguous"
    partition_seed: int = 0
    parallel: int = 1
    seed: int = 0
    regenerate_labels: bool = False

    def partition(self, class_count: int) -> ClassPartition:
        return partition_classes(class_count, self.k, self.strategy, self.partition_seed)


@dataclass
class EvalSection(DownstreamConfig):
    architectures: tuple[str, ...] = ("convnet",)

    def __post_init__(self):
        super().__post_init__()
        bad = [a for a in self.architectures if a not in ARCHITECTURES]
        if bad or not self.architectures:
            raise ConfigError(f"unknown architectures {bad}; choose from {ARCHITECTURES}", "eval.architectures")

    def downstream(self) -> DownstreamConfig:
        kw = {f.name: getattr(self, f.name) for f in dataclasses.fields(DownstreamConfig)}
        return DownstreamConfig(**kw)


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    experts: ExpertPlan = field(default_factory=ExpertPlan)
    distill: DistillConfig = field(default_factory=DistillConfig)
    federated: FederatedSection = field(default_factory=FederatedSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return to_plain(self)

    def federated_plan(self, class_count: int) -> FederatedPlan:
        return FederatedPlan(self.federated.partition(class_count), self.distill, self.experts, self.federated.seed)

    def data_root(self) -> str | None:
        return os.environ.get(DATA_ROOT_ENV) or self.dataset.root


# --- generic dataclass construction ---


def to_plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_plain(v) for k, v in obj.items()}
    return obj


def _type_name(tp) -> str:
    return getattr(tp, "__name__", None) or str(tp)


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if tp is Any:
        return value
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        if isinstance(value, dict):
            structured = [a for a in args if dataclasses.is_dataclass(a)]
            if len(structured) == 1:
                return build(structured[0], value, path)
        for arm in args:
            if arm is type(None):
                continue
            try:
                return _coerce(arm, value, path)
            except ConfigError:
                continue
        raise ConfigError(f"{value!r} matches none of {[_type_name(a) for a in args]}", path)
    if origin is Literal:
        if value not in args:
            raise ConfigError(f"{value!r} not one of {list(args)}", path)
        return value
    if dataclasses.is_dataclass(tp):
        return build(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}", path)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"expected {len(args)} items, got {len(value)}", path)
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}", path)
        return [_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)] if args else list(value)
    if origin is dict or tp is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"expected a mapping, got {value!r}", path)
        return dict(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", path)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path)
        return value
    raise ConfigError(f"unsupported field type {tp}", path)


def build(cls, data: dict | None, path: str = ""):
    """Instantiate dataclass ``cls`` from a mapping, recursing into nested dataclasses."""
    data = {} if data is None else data
    if dataclasses.is_dataclass(data) and isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping, got {data!r}", path)
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        key = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(f"unknown config key (known: {', '.join(sorted(fields))})", key)
    kw = {}
    for name, value in data.items():
        key = f"{path}.{name}" if path else name
        kw[name] = _coerce(hints[name], value, key)
    try:
        return cls(**kw)
    except ConfigError as exc:
        if exc.key_path is None and path:
            raise ConfigError(str(exc), path) from exc
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), path or None) from exc


def _set_path(tree: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = tree
    for p in parts[:-1]:
        child = node.setdefault(p, {})
        if not isinstance(child, dict):
            raise ConfigError(f"cannot set {dotted!r}: {p!r} is not a section", dotted)
        node = child
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    tree: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist", "config")
        try:
            tree = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {p} is not valid YAML/JSON: {exc}", "config") from exc
    for item in overrides or []:
        key, value = parse_override(item)
        _set_path(tree, key, value)
    return build(RunConfig, tree)


def config_from_dict(tree: dict) -> RunConfig:
    return build(RunConfig, tree)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


__all__ = [
    "DATA_ROOT_ENV",
    "DatasetSection",
    "DecoderSpec",
    "EvalSection",
    "FederatedSection",
    "RunConfig",
    "build",
    "config_from_dict",
    "dump_config",
    "load_config",
    "parse_override",
    "to_plain",
]
