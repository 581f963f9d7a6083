"""Input-space attacks: FGSM and PGD under l-inf and l2 threat models."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, NumericError
from .losses import ce_objective

Objective = Callable[[Tensor, np.ndarray], Tensor]

NORMS = ("linf", "l2")
_TINY = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    norm: str = "linf"
    epsilon: float = 0.1
    alpha: float = 0.01
    steps: int = 10
    random_start: bool = True
    input_box: tuple[float, float] | None = None

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ConfigError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.alpha <= 0:
            raise ConfigError("alpha must be > 0")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.input_box is not None:
            lo, hi = self.input_box
            if lo > hi:
                raise ConfigError(f"input_box lower bound above upper: {self.input_box}")


@dataclass
class AdvBatch:
    x: np.ndarray
    x_adv: np.ndarray
    y: np.ndarray
    per_example_loss: np.ndarray


def _rows(a: np.ndarray) -> np.ndarray:
    return a.reshape(a.shape[0], -1)


def project_ball(delta: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Project a single-example perturbation onto the epsilon ball."""
    delta = np.asarray(delta, dtype=np.float64)
    return project_batch(delta[None, ...], cfg)[0]


def project_batch(delta: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Row-wise projection; the first axis indexes examples."""
    eps = cfg.epsilon
    if cfg.norm == "linf":
        return np.clip(delta, -eps, eps)
    norms = np.sqrt(np.sum(_rows(delta) ** 2, axis=1))
    out = delta.copy()
    outside = norms > eps
    if np.any(outside):
        norms = norms[outside].reshape((-1,) + (1,) * (delta.ndim - 1))
        out[outside] = delta[outside] * eps / norms
    return out


def _clamp(x_adv: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    if cfg.input_box is None:
        return x_adv
    return np.clip(x_adv, cfg.input_box[0], cfg.input_box[1])


def random_start(x: np.ndarray, cfg: AttackConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from the epsilon ball around each example."""
    if cfg.epsilon == 0:
        return x.copy()
    if cfg.norm == "linf":
        delta = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape)
    else:
        flat = rng.standard_normal(_rows(x).shape)
        flat /= np.maximum(np.linalg.norm(flat, axis=1, keepdims=True), _TINY)
        d = flat.shape[1]
        radius = cfg.epsilon * rng.uniform(size=(flat.shape[0], 1)) ** (1.0 / d)
        delta = project_batch((flat * radius).reshape(x.shape), cfg)
    return _clamp(x + delta, cfg)


def loss_and_grad(model, x_adv: np.ndarray, y, objective: Objective) -> tuple[np.ndarray, np.ndarray]:
    """Per-example losses at ``x_adv`` and the input gradient of their sum."""
    xt = Tensor(x_adv, requires_grad=True)
    losses = objective(model.forward(xt), y)
    g = ad.gradient(losses.sum(), xt)
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite input gradient")
    return losses.data, g


def losses_at(model, x_adv: np.ndarray, y, objective: Objective) -> np.ndarray:
    return objective(model.forward(x_adv), y).data


def _ascent_direction(g: np.ndarray, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.sign(g)
    norms = np.sqrt(np.sum(_rows(g) ** 2, axis=1))
    safe = np.where(norms > _TINY, norms, 1.0)
    direction = g / safe.reshape((-1,) + (1,) * (g.ndim - 1))
    direction[norms <= _TINY] = 0.0
    return direction


def fgsm(model, x, y, cfg: AttackConfig, objective: Objective | None = None) -> AdvBatch:
    """One signed-gradient step of size epsilon (l-inf only)."""
    if cfg.norm != "linf":
        raise ContractError("FGSM is defined for the l-inf threat model")
    objective = objective or ce_objective
    x = np.asarray(x, dtype=np.float64)
    _, g = loss_and_grad(model, x, y, objective)
    x_adv = _clamp(x + cfg.epsilon * np.sign(g), cfg)
    return AdvBatch(x, x_adv, np.asarray(y), losses_at(model, x_adv, y, objective))


def pgd(
    model,
    x,
    y,
    cfg: AttackConfig,
    rng: np.random.Generator | None = None,
    objective: Objective | None = None,
) -> AdvBatch:
    """Projected gradient ascent with optional uniform random start.

    l-inf steps follow ``alpha * sign(g)``; l2 steps follow
    ``alpha * g / ||g||`` with a zero step where ``||g|| <= 1e-12``.
    """
    objective = objective or ce_objective
    x = np.asarray(x, dtype=np.float64)
    if cfg.random_start:
        if rng is None:
            raise ContractError("random_start needs an rng")
        x_adv = random_start(x, cfg, rng)
    else:
        x_adv = x.copy()
    for _ in range(cfg.steps):
        _, g = loss_and_grad(model, x_adv, y, objective)
        stepped = x_adv + cfg.alpha * _ascent_direction(g, cfg.norm)
        x_adv = _clamp(x + project_batch(stepped - x, cfg), cfg)
    return AdvBatch(x, x_adv, np.asarray(y), losses_at(model, x_adv, y, objective))


def attack(model, x, y, cfg: AttackConfig, rng=None, objective=None, method: str = "pgd") -> AdvBatch:
    if method == "fgsm":
        return fgsm(model, x, y, cfg, objective)
    return pgd(model, x, y, cfg, rng, objective)


def evaluate_robustness(
    model,
    x,
    y,
    cfg: AttackConfig,
    seed: int = 0,
    method: str = "pgd",
    batch_size: int = 500,
) -> float:
    """Fraction of examples still classified correctly after the attack."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(y) == 0:
        raise ContractError("cannot evaluate robustness on an empty dataset")
    rng = np.random.default_rng(seed)
    correct = 0
    for start in range(0, len(y), batch_size):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        adv = attack(model, xb, yb, cfg, rng, method=method)
        correct += int(np.sum(model.predict(adv.x_adv) == yb))
    return correct / len(y)


def natural_accuracy(model, x, y, batch_size: int = 1000) -> float:
    y = np.asarray(y)
    if len(y) == 0:
        raise ContractError("cannot evaluate accuracy on an empty dataset")
    correct = 0
    for start in range(0, len(y), batch_size):
        correct += int(np.sum(model.predict(x[start:start + batch_size]) == y[start:start + batch_size]))
    return correct / len(y)
