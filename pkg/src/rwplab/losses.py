"""Per-example training objectives: cross-entropy, TRADES and RST."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError

LOSS_KINDS = ("CE", "TRADES", "RST")


@dataclass(frozen=True)
class LossSpec:
    """Which objective to train with.

    ``kl_order="nat_adv"`` computes KL(f(x) || f(x')); ``"adv_nat"`` swaps
    the arguments. ``mask_loss`` picks what the weight-perturbation mask
    thresholds under TRADES/RST: the full composite or the KL term alone.
    """

    kind: str = "CE"
    beta: float = 6.0
    lam: float = 1.0
    kl_order: str = "nat_adv"
    mask_loss: str = "composite"

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if self.beta < 0 or self.lam < 0:
            raise ConfigError("beta and lambda must be nonnegative")
        if self.kl_order not in ("nat_adv", "adv_nat"):
            raise ConfigError(f"bad kl_order {self.kl_order!r}")
        if self.mask_loss not in ("composite", "kl"):
            raise ConfigError(f"bad mask_loss {self.mask_loss!r}")

    @property
    def uses_kl_attack(self) -> bool:
        return self.kind in ("TRADES", "RST")


def _check_labels(logits: Tensor, labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ContractError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ContractError(f"labels must lie in [0, {logits.shape[1]})")
    return labels.astype(np.int64)


def cross_entropy(logits, labels) -> Tensor:
    """Per-example ``-log softmax(logits)[label]``."""
    logits = ad.as_tensor(logits)
    return ad.softmax_cross_entropy(logits, _check_labels(logits, labels))


def kl_div(logits_nat, logits_adv) -> Tensor:
    """Per-example KL(softmax(logits_nat) || softmax(logits_adv))."""
    return ad.kl_div(ad.as_tensor(logits_nat), ad.as_tensor(logits_adv))


def _kl(spec: LossSpec, nat: Tensor, adv: Tensor) -> Tensor:
    return kl_div(nat, adv) if spec.kl_order == "nat_adv" else kl_div(adv, nat)


def trades_terms(model, x, x_adv, y, spec: LossSpec, params=None) -> tuple[Tensor, Tensor]:
    """Return the per-example natural CE and KL terms of the TRADES objective."""
    fwd = model.forward if params is None else (lambda z: model.forward(z, params))
    nat = fwd(x)
    adv = fwd(x_adv)
    return cross_entropy(nat, y), _kl(spec, nat, adv)


def trades_loss(model, x, x_adv, y, spec: LossSpec, params=None) -> Tensor:
    """Per-example ``CE(f(x), y) + beta * KL(f(x) || f(x'))``."""
    if spec.kind not in ("TRADES", "RST"):
        raise ContractError(f"trades_loss called with loss kind {spec.kind!r}")
    ce, kl = trades_terms(model, x, x_adv, y, spec, params)
    return ce + kl * spec.beta


def rst_loss(model, labeled, pseudo, spec: LossSpec, params=None) -> Tensor:
    """Scalar ``mean TRADES(labeled) + lambda * mean TRADES(pseudo)``.

    ``labeled`` and ``pseudo`` are ``(x, x_adv, y)`` triples; the pseudo
    triple carries pseudo-labels.
    """
    if spec.kind != "RST":
        raise ContractError(f"rst_loss called with loss kind {spec.kind!r}")
    x, x_adv, y = labeled
    total = trades_loss(model, x, x_adv, y, spec, params).mean()
    if spec.lam == 0:
        return total
    px, px_adv, py = pseudo
    if len(py) == 0:
        raise ContractError("empty pseudo-labeled batch with lambda > 0")
    return total + trades_loss(model, px, px_adv, py, spec, params).mean() * spec.lam


def per_example_loss(model, x, x_adv, y, spec: LossSpec, params=None, for_mask: bool = False) -> Tensor:
    """The per-example training loss evaluated at ``x_adv``.

    CE uses the adversarial logits only. TRADES/RST use the composite (or
    the KL term alone when ``for_mask`` and ``spec.mask_loss == "kl"``).
    """
    if spec.kind == "CE":
        logits = model.forward(x_adv) if params is None else model.forward(x_adv, params)
        return cross_entropy(logits, y)
    ce, kl = trades_terms(model, x, x_adv, y, spec, params)
    if for_mask and spec.mask_loss == "kl":
        return kl
    return ce + kl * spec.beta


# attack objectives: callables (logits_adv, y) -> per-example Tensor

def ce_objective(logits_adv: Tensor, y) -> Tensor:
    return cross_entropy(logits_adv, y)


def kl_objective(logits_nat: np.ndarray, kl_order: str = "nat_adv"):
    """Attack objective for TRADES: KL against fixed natural logits."""
    nat = Tensor(logits_nat)

    def objective(logits_adv: Tensor, y) -> Tensor:
        if kl_order == "nat_adv":
            return kl_div(nat, logits_adv)
        return kl_div(logits_adv, nat)

    return objective
