"""Differentiable classifiers backed by a single flat weight vector.

The flat layout is ``[W1, b1, W2, b2, ...]`` with each ``W`` stored as
``(fan_in, fan_out)`` in row-major order, so ``x @ W + b`` is the affine map.
Biases live in the flat vector and are therefore perturbed along with the
matrices.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, FormatError, ShapeError

CHECKPOINT_FORMAT = "rwplab-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    """Architecture description.

    ``kind`` is ``"logreg"`` (one affine layer) or ``"mlp2"`` (two hidden
    ReLU layers of size ``width``).
    """

    kind: str
    in_dim: int
    class_count: int
    width: int = 256

    def layer_dims(self) -> list[tuple[int, int]]:
        if self.kind == "logreg":
            dims = [self.in_dim, self.class_count]
        elif self.kind == "mlp2":
            dims = [self.in_dim, self.width, self.width, self.class_count]
        else:
            raise ConfigError(f"unknown architecture {self.kind!r}")
        if min(dims) <= 0:
            raise ConfigError(f"zero-width layer in {dims}")
        return list(zip(dims[:-1], dims[1:]))


def _layout(spec: ArchSpec):
    offset = 0
    layout = []
    for fan_in, fan_out in spec.layer_dims():
        w_slice = slice(offset, offset + fan_in * fan_out)
        offset = w_slice.stop
        b_slice = slice(offset, offset + fan_out)
        offset = b_slice.stop
        layout.append((fan_in, fan_out, w_slice, b_slice))
    return layout, offset


def _forward(spec: ArchSpec, params: Tensor, x) -> Tensor:
    x = ad.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != spec.in_dim:
        raise ShapeError(f"expected input [batch, {spec.in_dim}], got {x.shape}")
    layout, _ = _layout(spec)
    h = x
    for i, (fan_in, fan_out, ws, bs) in enumerate(layout):
        W = params[ws].reshape(fan_in, fan_out)
        b = params[bs]
        h = h @ W + b
        if i < len(layout) - 1:
            h = ad.relu(h)
    return h


class Model:
    """Classifier ``f_w`` with flat weights ``w``."""

    def __init__(self, spec: ArchSpec, weights: np.ndarray, seed: int | None = None, step: int = 0):
        _, count = _layout(spec)
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (count,):
            raise ShapeError(f"{spec.kind} needs {count} weights, got shape {weights.shape}")
        self.spec = spec
        self.weights = weights
        self.seed = seed
        self.step = step

    @property
    def class_count(self) -> int:
        return self.spec.class_count

    @property
    def num_weights(self) -> int:
        return self.weights.size

    def params(self, requires_grad: bool = False) -> Tensor:
        return Tensor(self.weights, requires_grad=requires_grad, name="w")

    def forward(self, x, params: Tensor | None = None) -> Tensor:
        return _forward(self.spec, self.params() if params is None else params, x)

    __call__ = forward

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(x).data, axis=1)

    def unflatten(self) -> list[tuple[np.ndarray, np.ndarray]]:
        layout, _ = _layout(self.spec)
        return [
            (self.weights[ws].reshape(fi, fo), self.weights[bs])
            for fi, fo, ws, bs in layout
        ]

    @staticmethod
    def flatten(layers) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b.ravel()]) for W, b in layers])

    def weight_norm(self) -> float:
        return l2(self.weights)

    def attach(self, v: np.ndarray) -> "PerturbedView":
        return PerturbedView(self, v)

    def copy(self) -> "Model":
        return Model(self.spec, self.weights.copy(), self.seed, self.step)

    def with_weights(self, weights: np.ndarray) -> "Model":
        return Model(self.spec, weights, self.seed, self.step)


class PerturbedView:
    """``f_{w+v}``: a model evaluated at its weights plus an additive ``v``.

    The base weights are never written; :meth:`detach` hands back the base
    model untouched.
    """

    def __init__(self, model: Model, v: np.ndarray | None = None):
        v = np.zeros_like(model.weights) if v is None else np.asarray(v, dtype=np.float64)
        if v.shape != model.weights.shape:
            raise ShapeError(f"perturbation shape {v.shape} != weight shape {model.weights.shape}")
        self.model = model
        self.v = v

    @property
    def spec(self) -> ArchSpec:
        return self.model.spec

    @property
    def class_count(self) -> int:
        return self.model.class_count

    def perturbation(self, requires_grad: bool = False) -> Tensor:
        return Tensor(self.v, requires_grad=requires_grad, name="v")

    def params(self, v: Tensor | None = None) -> Tensor:
        return self.model.params() + (self.perturbation() if v is None else v)

    def forward(self, x, v: Tensor | None = None) -> Tensor:
        return _forward(self.spec, self.params(v), x)

    __call__ = forward

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(x).data, axis=1)

    def perturb_norm(self) -> float:
        return l2(self.v)

    def weight_norm(self) -> float:
        return self.model.weight_norm()

    def materialize(self) -> Model:
        return self.model.with_weights(self.model.weights + self.v)

    def detach(self) -> Model:
        self.v = np.zeros_like(self.v)
        return self.model


def l2(x: np.ndarray) -> float:
    """Global l2 norm of a flat vector."""
    x = np.asarray(x, dtype=np.float64).ravel()
    return float(np.sqrt(np.dot(x, x)))


def weight_norm(model: Model) -> float:
    return model.weight_norm()


def perturb_norm(view: PerturbedView) -> float:
    return view.perturb_norm()


def init_weights(spec: ArchSpec, seed: int) -> Model:
    """Scaled-uniform fan-in initialization; biases start at zero.

    Each weight matrix is drawn from ``U(-a, a)`` with ``a = sqrt(3 / fan_in)``,
    which gives standard deviation ``1/sqrt(fan_in)``.
    """
    if not 0 <= int(seed) < 2**64:
        raise ConfigError(f"seed must be a 64-bit unsigned value, got {seed}")
    rng = np.random.default_rng(int(seed))
    layers = []
    for fan_in, fan_out in spec.layer_dims():
        bound = np.sqrt(3.0 / fan_in)
        layers.append((rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)))
    model = Model(spec, Model.flatten(layers), seed=int(seed))
    if model.weight_norm() == 0.0:
        raise ContractError("initialized model has zero weight norm")
    return model


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    """Write a bit-exact JSON checkpoint (weights stored as hex floats)."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": asdict(model.spec),
        "seed": model.seed,
        "step": model.step,
        "weights": [float(x).hex() for x in model.weights],
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path) -> tuple[Model, dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not a checkpoint ({exc})") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not an rwplab checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    spec = ArchSpec(**doc["arch"])
    weights = np.array([float.fromhex(h) for h in doc["weights"]], dtype=np.float64)
    model = Model(spec, weights, seed=doc.get("seed"), step=int(doc.get("step", 0)))
    return model, doc.get("extra", {})
