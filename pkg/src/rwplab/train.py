"""Adversarial training with gated weight perturbation.

One step: attack the batch, build ``v`` with :func:`rwp_generate`, take the
gradient of the mean loss at ``w + v`` and apply an SGD-with-momentum update
to the clean weights ``w``.  Gradient and weight decay are both evaluated at
``w + v``; the momentum buffer belongs to ``w``.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, evaluate_robustness, natural_accuracy, pgd
from .autodiff import Tensor
from .data import Dataset
from .errors import ConfigError, ContractError, NumericError
from .losses import LossSpec, ce_objective, kl_objective, per_example_loss
from .models import ArchSpec, Model, PerturbedView, init_weights, save_checkpoint
from .perturb import LSCRange, PerturbBatch, PerturbConfig, rwp_generate

log = logging.getLogger(__name__)

DEFAULT_LSC_BINS = (0.0, 0.5, 1.0, 1.7, 2.5, 4.0, math.inf)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_milestones: tuple[int, ...] = (15, 23)
    lr_factor: float = 0.1
    seed: int = 0
    attack: AttackConfig = field(default_factory=AttackConfig)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    loss: LossSpec = field(default_factory=LossSpec)
    eval_attack: AttackConfig = field(
        default_factory=lambda: AttackConfig(epsilon=0.1, alpha=0.01, steps=20)
    )
    lsc_bins: tuple[float, ...] = DEFAULT_LSC_BINS
    eval_train_count: int | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0:
            raise ConfigError("epochs must be >= 0 and batch_size > 0")
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("lr, momentum and weight_decay must be nonnegative")
        if any(b <= a for a, b in zip(self.lr_milestones, self.lr_milestones[1:])):
            raise ConfigError(f"lr_milestones must be strictly increasing: {self.lr_milestones}")
        if any(b <= a for a, b in zip(self.lsc_bins, self.lsc_bins[1:])):
            raise ConfigError("lsc_bins must be strictly increasing")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for zero-based ``epoch``: decayed once per milestone passed."""
    passed = sum(1 for m in cfg.lr_milestones if epoch >= m)
    return cfg.lr * cfg.lr_factor**passed


@dataclass
class SGDState:
    """Momentum buffer in the PyTorch convention (first step: buffer = d)."""

    buffer: np.ndarray | None = None

    def direction(self, d: np.ndarray, momentum: float) -> np.ndarray:
        if momentum == 0:
            return d
        if self.buffer is None:
            self.buffer = d.copy()
        else:
            self.buffer = momentum * self.buffer + d
        return self.buffer


@dataclass
class StepMetrics:
    mean_adv_loss: float
    adv_losses: np.ndarray
    perturb_steps: int
    perturb_norm: float


def lsc_histogram(losses: np.ndarray, edges: Sequence[float]) -> np.ndarray:
    """Counts over ``[e_k, e_{k+1})`` bins, the last bin closed on the right."""
    edges = np.asarray(edges, dtype=np.float64)
    idx = np.searchsorted(edges, losses, side="right") - 1
    idx = np.clip(idx, 0, len(edges) - 2)
    return np.bincount(idx, minlength=len(edges) - 1)


def _attack_objective(model, x, spec: LossSpec):
    if spec.uses_kl_attack:
        return kl_objective(model.forward(x).data, spec.kl_order)
    return ce_objective


def _loss_fn(spec: LossSpec, for_mask: bool = False):
    def fn(view: PerturbedView, batch: PerturbBatch, v: Tensor | None = None) -> Tensor:
        return per_example_loss(view, batch.x, batch.x_adv, batch.y, spec, params=v, for_mask=for_mask)

    return fn


def make_batch(model, x, y, cfg: TrainConfig, rng, pseudo=None) -> PerturbBatch:
    """Attack a labeled (and optional pseudo-labeled) batch.

    Reduction weights are ``1/n`` per labeled example and ``lambda/m`` per
    pseudo-labeled one, so the weighted loss sum equals the RST objective.
    """
    objective = _attack_objective(model, x, cfg.loss)
    adv = pgd(model, x, y, cfg.attack, rng, objective)
    if pseudo is None or cfg.loss.kind != "RST" or cfg.loss.lam == 0:
        return PerturbBatch(x, adv.x_adv, np.asarray(y))
    px, py = pseudo
    p_adv = pgd(model, px, py, cfg.attack, rng, _attack_objective(model, px, cfg.loss))
    weights = np.concatenate([np.full(len(y), 1.0 / len(y)), np.full(len(py), cfg.loss.lam / len(py))])
    return PerturbBatch(
        np.concatenate([x, px]), np.concatenate([adv.x_adv, p_adv.x_adv]), np.concatenate([y, py]), weights
    )


def train_step(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    opt: SGDState,
    rng: np.random.Generator,
    lr: float | None = None,
    pseudo=None,
) -> StepMetrics:
    """One outer iteration; updates ``model.weights`` in place of the old array."""
    if len(y) == 0:
        raise ContractError("empty batch")
    lr = cfg.lr if lr is None else lr
    batch = make_batch(model, x, y, cfg, rng, pseudo)
    spec = cfg.loss

    adv_losses = per_example_loss(model, batch.x, batch.x_adv, batch.y, spec).data
    if cfg.perturb.mode == "AT":
        v = None
        steps = 0
        point = model.weights
    else:
        mask_fn = _loss_fn(spec, for_mask=True) if spec.mask_loss == "kl" and spec.kind != "CE" else None
        state = rwp_generate(model, batch, cfg.perturb, _loss_fn(spec), mask_fn)
        v = state.v
        steps = state.steps_taken
        point = model.weights + v

    params = Tensor(point, requires_grad=True, name="w+v")
    losses = per_example_loss(model, batch.x, batch.x_adv, batch.y, spec, params=params)
    g = ad.gradient((losses * batch.weights).sum(), params)
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite weight gradient at step {model.step}")
    d = g + cfg.weight_decay * point if cfg.weight_decay else g
    # (w + v) - lr * step - v, written so that lr = 0 leaves w bit-identical
    model.weights = model.weights - lr * opt.direction(d, cfg.momentum)
    model.step += 1
    return StepMetrics(
        mean_adv_loss=float(np.mean(adv_losses[: len(y)])),
        adv_losses=adv_losses[: len(y)],
        perturb_steps=steps,
        perturb_norm=0.0 if v is None else float(np.linalg.norm(v)),
    )


@dataclass
class EpochRow:
    epoch: int
    lr: float
    train_nat_acc: float
    train_rob_acc: float
    test_nat_acc: float
    test_rob_acc: float
    mean_adv_loss: float
    perturb_steps: int
    lsc_hist: tuple[int, ...]


@dataclass
class Checkpoint:
    epoch: int
    step: int
    weights: np.ndarray
    test_rob_acc: float

    def model(self, spec: ArchSpec, seed=None) -> Model:
        return Model(spec, self.weights.copy(), seed=seed, step=self.step)


@dataclass
class RunRecord:
    label: str
    initial: EpochRow
    rows: list[EpochRow]
    best: Checkpoint
    last: Checkpoint
    arch: ArchSpec | None = None

    @property
    def best_rob_acc(self) -> float:
        return self.best.test_rob_acc

    @property
    def last_rob_acc(self) -> float:
        return self.last.test_rob_acc

    @property
    def overfit_gap(self) -> float:
        return self.best.test_rob_acc - self.last.test_rob_acc

    def curve(self) -> list[float]:
        return [self.initial.test_rob_acc] + [r.test_rob_acc for r in self.rows]


def evaluate_epoch(model, dataset: Dataset, cfg: TrainConfig, epoch: int):
    """Natural and robust accuracy on both splits with epoch-seeded attacks."""
    eval_cfg = cfg.eval_attack
    if dataset.input_box is not None and eval_cfg.input_box is None:
        eval_cfg = dataclasses.replace(eval_cfg, input_box=dataset.input_box)
    n_tr = len(dataset.y_train) if cfg.eval_train_count is None else cfg.eval_train_count
    x_tr, y_tr = dataset.x_train[:n_tr], dataset.y_train[:n_tr]
    seeds = np.random.SeedSequence([cfg.seed, epoch]).generate_state(2)
    return (
        natural_accuracy(model, x_tr, y_tr),
        evaluate_robustness(model, x_tr, y_tr, eval_cfg, seed=int(seeds[0])),
        natural_accuracy(model, dataset.x_test, dataset.y_test),
        evaluate_robustness(model, dataset.x_test, dataset.y_test, eval_cfg, seed=int(seeds[1])),
    )


def train(
    model: Model,
    dataset: Dataset,
    cfg: TrainConfig,
    out_dir=None,
    label: str = "run",
) -> RunRecord:
    """Full run: shuffled mini-batches, per-epoch evaluation, best/last tracking.

    ``model`` is trained in place. When ``out_dir`` is given the best and last
    checkpoints and the metrics CSV are written there.
    """
    if dataset.input_box is not None and cfg.attack.input_box is None:
        cfg = cfg.replace(attack=dataclasses.replace(cfg.attack, input_box=dataset.input_box))
    rng = np.random.default_rng(cfg.seed)
    opt = SGDState()
    n = len(dataset.y_train)
    bins = len(cfg.lsc_bins) - 1

    tr_nat, tr_rob, te_nat, te_rob = evaluate_epoch(model, dataset, cfg, 0)
    initial = EpochRow(0, lr_at(cfg, 0), tr_nat, tr_rob, te_nat, te_rob, math.nan, 0, (0,) * bins)
    best = last = Checkpoint(0, model.step, model.weights.copy(), te_rob)
    rows: list[EpochRow] = []
    pseudo_cursor = 0

    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        order = rng.permutation(n)
        hist = np.zeros(bins, dtype=np.int64)
        loss_sum = 0.0
        steps = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            pseudo = None
            if dataset.x_pseudo is not None and cfg.loss.kind == "RST":
                m = len(dataset.y_pseudo)
                pidx = (pseudo_cursor + np.arange(len(idx))) % m
                pseudo_cursor = (pseudo_cursor + len(idx)) % m
                pseudo = (dataset.x_pseudo[pidx], dataset.y_pseudo[pidx])
            try:
                metrics = train_step(
                    model, dataset.x_train[idx], dataset.y_train[idx], cfg, opt, rng, lr, pseudo
                )
            except NumericError as exc:
                raise NumericError(f"{exc} (epoch {epoch + 1}, step {model.step})", exc.op_index) from exc
            hist += lsc_histogram(metrics.adv_losses, cfg.lsc_bins)
            loss_sum += metrics.mean_adv_loss * len(idx)
            steps += metrics.perturb_steps
        tr_nat, tr_rob, te_nat, te_rob = evaluate_epoch(model, dataset, cfg, epoch + 1)
        row = EpochRow(epoch + 1, lr, tr_nat, tr_rob, te_nat, te_rob, loss_sum / n, steps, tuple(int(h) for h in hist))
        rows.append(row)
        last = Checkpoint(epoch + 1, model.step, model.weights.copy(), te_rob)
        if te_rob > best.test_rob_acc:
            best = last
        log.info(
            "%s epoch %d lr %.4g nat %.4f rob %.4f loss %.4f rwp-steps %d",
            label, epoch + 1, lr, te_nat, te_rob, row.mean_adv_loss, steps,
        )

    record = RunRecord(label, initial, rows, best, last, arch=model.spec)
    if out_dir is not None:
        persist_run(record, model, out_dir)
    return record


def persist_run(record: RunRecord, model: Model, out_dir) -> None:
    from .records import write_metrics_csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for tag, ck in (("best", record.best), ("last", record.last)):
        m = Model(model.spec, ck.weights, seed=model.seed, step=ck.step)
        save_checkpoint(m, out / f"{tag}.ckpt.json", extra={"epoch": ck.epoch, "test_rob_acc": ck.test_rob_acc})
    write_metrics_csv(record, out / "metrics.csv")


SWEEP_KEYS = ("c_min", "steps", "gamma", "lsc_range")


def sweep_config(cfg: TrainConfig, key: str, value) -> TrainConfig:
    """Base config with one perturbation knob replaced.

    ``c_min = 0`` maps to plain AT and ``c_min = inf`` to AWP, matching the
    limits the gate reduces to.
    """
    p = cfg.perturb
    if key == "c_min":
        value = float(value)
        mode = "AT" if value == 0 else ("AWP" if math.isinf(value) else "RWP")
        p = dataclasses.replace(p, c_min=value, mode=mode, lsc_range=None)
    elif key in ("steps", "K2"):
        p = dataclasses.replace(p, steps=int(value))
    elif key == "gamma":
        p = dataclasses.replace(p, gamma=float(value))
    elif key == "lsc_range":
        lo, hi = value
        p = dataclasses.replace(p, mode="RWP", lsc_range=LSCRange(float(lo), float(hi)))
    else:
        raise ConfigError(f"unknown sweep key {key!r}; choose from {SWEEP_KEYS}")
    return cfg.replace(perturb=p)


@dataclass
class AblationResult:
    key: str
    records: dict

    def table(self) -> list[dict]:
        return [
            {
                self.key: value,
                "best_rob_acc": rec.best_rob_acc,
                "last_rob_acc": rec.last_rob_acc,
                "gap": rec.overfit_gap,
                "last_nat_acc": rec.rows[-1].test_nat_acc if rec.rows else rec.initial.test_nat_acc,
            }
            for value, rec in self.records.items()
        ]

    def format_table(self) -> str:
        lines = [f"{self.key:>12} {'best':>8} {'last':>8} {'gap':>8} {'nat':>8}"]
        for row in self.table():
            lines.append(
                f"{str(row[self.key]):>12} {row['best_rob_acc']:8.4f} {row['last_rob_acc']:8.4f} "
                f"{row['gap']:8.4f} {row['last_nat_acc']:8.4f}"
            )
        return "\n".join(lines)


def run_ablation(
    cfg: TrainConfig,
    arch: ArchSpec,
    dataset: Dataset,
    key: str,
    values: Sequence,
    model_seed: int | None = None,
) -> AblationResult:
    """One full run per sweep value from the same initial weights and seed."""
    if not values:
        raise ContractError("sweep needs at least one value")
    records = {}
    for value in values:
        run_cfg = sweep_config(cfg, key, value)
        model = init_weights(arch, cfg.seed if model_seed is None else model_seed)
        label = f"{key}={value}"
        records[value if not isinstance(value, list) else tuple(value)] = train(model, dataset, run_cfg, label=label)
    return AblationResult(key, records)
