"""Run configuration files.

A run config is a JSON document with a ``version`` field and one section per
settings group::

    {"version": 1,
     "data":   {...}, "model": {...}, "train": {...},
     "attack": {...}, "eval_attack": {...}, "perturb": {...}, "loss": {...}}

Unknown keys are rejected at every level. Infinite values (``c_min``, the
last LSC bin edge) are written as the string ``"inf"``.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import AttackConfig
from .data import Dataset, gen_synthetic, load_mnist
from .errors import ConfigError
from .losses import LossSpec
from .models import ArchSpec
from .perturb import LSCRange, PerturbConfig
from .train import TrainConfig

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class DataConfig:
    kind: str = "mnist"
    path: str = "data"
    train_count: int = 1000
    test_count: int = 1000
    subset_seed: int | None = None
    n: int = 1000
    noise: float = 0.1
    seed: int = 0
    class_count: int = 2

    def load(self, base_dir=None) -> Dataset:
        if self.kind == "mnist":
            root = Path(self.path)
            if not root.is_absolute() and base_dir is not None and not root.exists():
                root = Path(base_dir) / root
            return load_mnist(root, self.train_count, self.test_count, self.subset_seed)
        if self.kind in ("gaussians", "moons"):
            return gen_synthetic(self.kind, self.n, self.noise, self.seed, class_count=self.class_count)
        raise ConfigError(f"unknown dataset kind {self.kind!r}")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "mlp2"
    width: int = 256
    seed: int = 0

    def arch(self, dataset: Dataset) -> ArchSpec:
        return ArchSpec(self.kind, dataset.in_dim, dataset.class_count, self.width)


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


_NESTED = ("attack", "eval_attack", "perturb", "loss")
_TUPLE_FIELDS = {"lr_milestones", "lsc_bins", "input_box"}


def _encode(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if isinstance(value, LSCRange):
        return [_encode(value.p), _encode(value.q)]
    if isinstance(value, (tuple, list)):
        return [_encode(v) for v in value]
    return value


def _decode_number(value, where):
    if isinstance(value, str):
        if value in ("inf", "+inf"):
            return math.inf
        if value == "-inf":
            return -math.inf
        raise ConfigError(f"{where}: expected a number or 'inf', got {value!r}")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    return value


def _section(cls, doc, where, skip=()):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected a table of settings")
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name not in skip}
    unknown = set(doc) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, raw in doc.items():
        key = f"{where}.{name}"
        default = getattr(cls(), name) if name not in skip else None
        if name == "lsc_range":
            kwargs[name] = None if raw is None else LSCRange(*(_decode_number(v, key) for v in raw))
        elif name in _TUPLE_FIELDS:
            kwargs[name] = None if raw is None else tuple(_decode_number(v, key) for v in raw)
        elif isinstance(default, bool):
            if not isinstance(raw, bool):
                raise ConfigError(f"{key}: expected true/false")
            kwargs[name] = raw
        elif isinstance(default, float):
            kwargs[name] = float(_decode_number(raw, key))
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(raw, bool) or not isinstance(raw, int):
                raise ConfigError(f"{key}: expected an integer, got {raw!r}")
            kwargs[name] = raw
        else:
            kwargs[name] = raw
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    version = doc.get("version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config version {version!r} (expected {SCHEMA_VERSION})")
    allowed = {"version", "data", "model", "train", *_NESTED}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    data = _section(DataConfig, doc.get("data", {}), "data")
    model = _section(ModelConfig, doc.get("model", {}), "model")
    nested = {}
    classes = {"attack": AttackConfig, "eval_attack": AttackConfig, "perturb": PerturbConfig, "loss": LossSpec}
    for name in _NESTED:
        if name in doc:
            nested[name] = _section(classes[name], doc[name], name)
    perturb = nested.get("perturb")
    if perturb is not None and math.isinf(perturb.c_min) and "mode" not in doc["perturb"]:
        # reserved token: an unbounded gate is AWP
        nested["perturb"] = dataclasses.replace(perturb, mode="AWP")
    train = _section(TrainConfig, doc.get("train", {}), "train", skip=_NESTED)
    if nested:
        train = dataclasses.replace(train, **nested)
    return RunConfig(data, model, train)


def _as_dict(obj, skip=()) -> dict:
    return {f.name: _encode(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.name not in skip}


def to_dict(cfg: RunConfig) -> dict:
    t = cfg.train
    return {
        "version": SCHEMA_VERSION,
        "data": _as_dict(cfg.data),
        "model": _as_dict(cfg.model),
        "train": _as_dict(t, skip=_NESTED),
        "attack": _as_dict(t.attack),
        "eval_attack": _as_dict(t.eval_attack),
        "perturb": _as_dict(t.perturb),
        "loss": _as_dict(t.loss),
    }


def dumps(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2) + "\n"


def loads(text: str) -> RunConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    return from_dict(doc)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dumps(cfg))


def paper_defaults() -> RunConfig:
    """The image-scale hyperparameters (CIFAR l-inf setting) as a config."""
    attack = AttackConfig(norm="linf", epsilon=8 / 255, alpha=2 / 255, steps=10, random_start=True, input_box=(0.0, 1.0))
    return RunConfig(
        train=TrainConfig(
            epochs=200,
            batch_size=128,
            lr=0.1,
            momentum=0.9,
            weight_decay=5e-4,
            lr_milestones=(100, 150),
            attack=attack,
            eval_attack=dataclasses.replace(attack, steps=20),
            perturb=PerturbConfig(gamma=0.01, steps=10, c_min=1.7, mode="RWP"),
        )
    )
