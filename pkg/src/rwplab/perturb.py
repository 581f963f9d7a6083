"""Loss-gated weight perturbation (RWP), with AWP and plain AT as limits.

Each inner step recomputes which adversarial examples have loss at most
``c_min`` at the current ``w + v``, ascends the masked mean loss with respect
to ``v`` and rescales ``v`` to norm ``gamma * ||w||``.  The loop stops early
as soon as no example qualifies.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .models import Model, PerturbedView, l2

MODES = ("AT", "AWP", "RWP")


@dataclass(frozen=True)
class LSCRange:
    p: float
    q: float

    def __post_init__(self):
        if self.p > self.q:
            raise ContractError(f"LSC range needs p <= q, got [{self.p}, {self.q}]")
        if self.p < 0:
            raise ContractError("LSC lower bound must be nonnegative")


@dataclass(frozen=True)
class PerturbConfig:
    """Weight-perturbation settings.

    ``mode="AT"`` disables perturbation (``c_min`` treated as 0),
    ``mode="AWP"`` perturbs on every example (``c_min`` treated as +inf).
    When ``lsc_range`` is set the mask selects losses in ``[p, q]`` instead
    of ``loss <= c_min``.
    """

    gamma: float = 0.01
    steps: int = 10
    c_min: float = 1.7
    mode: str = "RWP"
    lsc_range: LSCRange | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if not self.c_min >= 0:
            raise ConfigError("c_min must be >= 0 (inf allowed)")

    @property
    def effective_c_min(self) -> float:
        if self.mode == "AT":
            return 0.0
        if self.mode == "AWP":
            return math.inf
        return self.c_min


@dataclass
class PerturbState:
    v: np.ndarray
    mask: np.ndarray
    steps_taken: int = 0
    mask_sizes: list[int] = field(default_factory=list)


@dataclass
class PerturbBatch:
    """Adversarial batch plus per-example reduction weights.

    ``weights`` defaults to ``1/n`` for every example, so the weighted sum of
    per-example losses is the batch mean.
    """

    x: np.ndarray
    x_adv: np.ndarray
    y: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        if self.weights is None:
            n = len(self.y)
            self.weights = np.full(n, 1.0 / n)


# loss_fn(view, batch, v_tensor) -> per-example losses at w + v
LossFn = Callable[[PerturbedView, PerturbBatch, "Tensor | None"], Tensor]


def ce_loss_fn(view: PerturbedView, batch: PerturbBatch, v: Tensor | None = None) -> Tensor:
    from .losses import cross_entropy

    return cross_entropy(view.forward(batch.x_adv, v), batch.y)


def lsc_group(losses, rng: LSCRange) -> np.ndarray:
    """Boolean mask of examples with ``p <= loss <= q``."""
    losses = np.asarray(losses, dtype=np.float64)
    if rng.p > rng.q:
        raise ContractError(f"LSC range needs p <= q, got [{rng.p}, {rng.q}]")
    if not np.all(np.isfinite(losses)) or np.any(losses < 0):
        raise ContractError("LSC grouping needs finite nonnegative losses")
    return (losses >= rng.p) & (losses <= rng.q)


def threshold_mask(losses, c_min: float) -> np.ndarray:
    return np.asarray(losses) <= c_min


def rwp_mask(
    view: PerturbedView,
    batch: PerturbBatch,
    c_min: float,
    loss_fn: LossFn = ce_loss_fn,
    lsc_range: LSCRange | None = None,
) -> np.ndarray:
    """Mask of examples whose loss at the current ``w + v`` is at most ``c_min``."""
    losses = loss_fn(view, batch, None).data
    if lsc_range is not None:
        return lsc_group(losses, lsc_range)
    return threshold_mask(losses, c_min)


def _masked_gradient(losses: Tensor, v: Tensor, batch: PerturbBatch, mask: np.ndarray) -> np.ndarray:
    objective = (losses * (batch.weights * mask)).sum()
    return ad.gradient(objective, v)


def masked_ascent_gradient(
    view: PerturbedView, batch: PerturbBatch, mask: np.ndarray, loss_fn: LossFn = ce_loss_fn
) -> np.ndarray:
    """Gradient w.r.t. ``v`` of ``sum_i weight_i * mask_i * loss_i``."""
    v = view.perturbation(requires_grad=True)
    return _masked_gradient(loss_fn(view, batch, v), v, batch, mask)


def renormalize(v: np.ndarray, gamma: float, w_norm: float) -> np.ndarray:
    """``gamma * v / ||v|| * ||w||``; a zero ``v`` is returned unchanged."""
    n = l2(v)
    if n == 0.0:
        return v
    return gamma * (v / n) * w_norm


def rwp_step(
    view: PerturbedView,
    batch: PerturbBatch,
    mask: np.ndarray,
    gamma: float,
    loss_fn: LossFn = ce_loss_fn,
    grad_scale: float = 1.0,
) -> np.ndarray:
    """One ascent-and-renormalize update of ``v``; returns the new ``v``.

    ``grad_scale`` multiplies the raw gradient before it is added; it exists
    to exercise the direction-only nature of the update.
    """
    if not np.any(mask):
        raise ContractError("rwp_step needs at least one selected example")
    g = masked_ascent_gradient(view, batch, mask, loss_fn)
    if grad_scale != 1.0:
        g = g * grad_scale
    return renormalize(view.v + g, gamma, view.weight_norm())


def rwp_generate(
    model: Model,
    batch: PerturbBatch,
    cfg: PerturbConfig,
    loss_fn: LossFn = ce_loss_fn,
    mask_loss_fn: LossFn | None = None,
) -> PerturbState:
    """Run the gated perturbation loop and return the final ``v``.

    ``mask_loss_fn`` (default: ``loss_fn``) is the per-example loss compared
    against ``c_min``; ``loss_fn`` is the one ascended. Each iteration is
    equivalent to :func:`rwp_mask` followed by :func:`rwp_step`, sharing one
    forward pass.
    """
    n = len(batch.y)
    view = PerturbedView(model)
    state = PerturbState(v=view.v, mask=np.zeros(n, dtype=bool))
    if cfg.mode == "AT":
        return state
    c_min = cfg.effective_c_min
    w_norm = model.weight_norm()
    for _ in range(cfg.steps):
        v = view.perturbation(requires_grad=True)
        losses = loss_fn(view, batch, v)
        gate = losses.data if mask_loss_fn is None else mask_loss_fn(view, batch, None).data
        if cfg.lsc_range is not None:
            mask = lsc_group(gate, cfg.lsc_range)
        else:
            mask = threshold_mask(gate, c_min)
        state.mask = mask
        state.mask_sizes.append(int(mask.sum()))
        if not mask.any():
            break
        g = _masked_gradient(losses, v, batch, mask)
        view.v = renormalize(view.v + g, cfg.gamma, w_norm)
        state.steps_taken += 1
    state.v = view.v
    return state
