"""Experiment configuration: nested dataclasses read from YAML with dotted overrides.

A config file is a YAML mapping whose top-level keys are ``seed``, ``data``,
``meta``, ``eval`` and ``sweep``; every key is optional and falls back to
the dataclass default. ``--set meta.learner.svm_c=0.5`` style overrides
are applied to the raw mapping before it is validated, with values parsed
as YAML scalars (so ``null``, ``1e-3`` and ``[1, 5]`` work).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import re
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

import yaml

from .base_learners import LearnerConfig
from .embedding import EmbeddingSpec
from .episodes import EpisodeConfig
from .meta_loop import MetaConfig
from .qp_core import SolverConfig

SCHEMA_VERSION = 1


class _Loader(yaml.SafeLoader):
    pass


# YAML 1.1 reads "1e-3" as a string; accept exponent floats without a dot
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+][0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def _yaml(text: str):
    return yaml.load(text, Loader=_Loader)


@dataclass(frozen=True)
class DataConfig:
    path: Optional[str] = None
    format: str = "csv"
    manifest: Optional[str] = None
    classes: Tuple[int, int, int] = (400, 50, 100)
    informative_dim: int = 16
    noise_dim: int = 64
    cluster_spread: float = 0.3
    items_per_class: int = 60

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(int(c) for c in self.classes))


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 2000
    shots: Tuple[int, ...] = (1, 5)
    split: str = "meta_test"
    way: Optional[int] = None
    query: int = 15
    timing_episodes: int = 200

    def __post_init__(self):
        object.__setattr__(self, "shots", tuple(int(s) for s in self.shots))


@dataclass(frozen=True)
class SweepConfig:
    train_shots: Tuple[int, ...] = (1, 5, 10)
    qp_iters: Tuple[Optional[int], ...] = (1, 2, 3, 5, 10, None)
    learners: Tuple[str, ...] = ("nearest_class_mean", "ridge", "svm_cs")

    def __post_init__(self):
        for name in ("train_shots", "qp_iters", "learners"):
            object.__setattr__(self, name, tuple(getattr(self, name)))


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    meta: MetaConfig = field(default_factory=lambda: MetaConfig(
        embedding=EmbeddingSpec("linear", 80, 64)))
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)


def _build(cls, raw: Any, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ValueError(f"{where or 'config'} must be a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ValueError(f"unknown config keys under {where or 'root'}: {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        tp = hints[key]
        if dataclasses.is_dataclass(tp):
            kwargs[key] = _build(tp, value, f"{where}.{key}" if where else key)
        elif isinstance(value, list):
            kwargs[key] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def to_dict(cfg) -> Dict[str, Any]:
    """Plain nested dict (tuples become lists) suitable for JSON or YAML."""
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    raw = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValueError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = _yaml(text)
    return raw


def from_dict(raw: Dict[str, Any]) -> ExperimentConfig:
    # start from the defaults so partial files only override what they name
    merged = _deep_merge(to_dict(ExperimentConfig()), raw or {})
    return _build(ExperimentConfig, merged, "")


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def load(path: Optional[str], overrides: Sequence[str] = (), seed: Optional[int] = None):
    raw = {}
    if path is not None:
        raw = _yaml(Path(path).read_text()) or {}
    raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw["seed"] = seed
    return from_dict(raw)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def meta_from_dict(raw: Dict[str, Any]) -> MetaConfig:
    return _build(MetaConfig, raw, "meta")


__all__ = [
    "DataConfig", "EvalConfig", "SweepConfig", "ExperimentConfig", "LearnerConfig",
    "EpisodeConfig", "SolverConfig", "load", "from_dict", "to_dict", "apply_overrides",
    "config_hash", "SCHEMA_VERSION",
]
