"""Acceptance suite: one test per numbered criterion, each printing a PASS/FAIL line."""
import dataclasses
import math
import time
from pathlib import Path

import numpy as np
import pytest

from acceptance_log import report
from idx_fuzz import corpus
from rwplab import autodiff as ad
from rwplab.attacks import AttackConfig, fgsm, pgd
from rwplab.config import DataConfig, ModelConfig, RunConfig, dumps, loads
from rwplab.data import IMAGE_MAGIC, gen_synthetic, load_mnist, read_idx
from rwplab.errors import FormatError
from rwplab.losses import LossSpec, cross_entropy, kl_div, trades_loss
from rwplab.models import ArchSpec, Model, PerturbedView, init_weights
from rwplab.perturb import (
    LSCRange,
    PerturbBatch,
    PerturbConfig,
    ce_loss_fn,
    rwp_generate,
    rwp_step,
)
from rwplab.records import read_metrics_csv, render_curves_svg, write_metrics_csv
from rwplab.train import EpochRow, SGDState, TrainConfig, run_ablation, train, train_step

DATA = Path(__file__).resolve().parents[1] / "data"


def random_model(rng, in_dim=None, classes=None, scale=1.0):
    kind = rng.choice(["logreg", "mlp2"])
    spec = ArchSpec(
        str(kind),
        int(in_dim or rng.integers(2, 5)),
        int(classes or rng.integers(2, 5)),
        width=int(rng.integers(3, 6)),
    )
    base = init_weights(spec, int(rng.integers(2**31)))
    return Model(spec, scale * rng.normal(size=base.weights.shape))


def random_batch(rng, model, n=None, eps=0.3):
    n = int(n or rng.integers(2, 5))
    x = rng.normal(size=(n, model.spec.in_dim))
    x_adv = x + rng.uniform(-eps, eps, size=x.shape)
    y = rng.integers(0, model.spec.class_count, size=n)
    return x, x_adv, y


# ---------------------------------------------------------------- criterion 1

def _gradient_case(kind, rng):
    model = random_model(rng)
    x, x_adv, y = random_batch(rng, model)
    w = model.weights
    if kind == "CE":
        return (lambda w, x: cross_entropy(model.forward(x, w), y).mean()), {"w": w, "x": x}
    if kind == "KL":
        return (
            lambda w, x, xa: kl_div(model.forward(x, w), model.forward(xa, w)).sum(),
            {"w": w, "x": x, "xa": x_adv},
        )
    if kind == "TRADES":
        spec = LossSpec(kind="TRADES", beta=float(rng.uniform(0.5, 8.0)))
        return (lambda w, xa: trades_loss(model, x, xa, y, spec, params=w).mean()), {"w": w, "xa": x_adv}
    view = PerturbedView(model, 0.05 * rng.normal(size=w.shape))
    batch = PerturbBatch(x, x_adv, y)
    mask = rng.random(len(y)) < 0.6
    mask[rng.integers(len(y))] = True
    coef = batch.weights * mask
    return (lambda v: (ce_loss_fn(view, batch, v) * coef).sum()), {"v": view.v}


def test_criterion_1_gradient_suite():
    rng = np.random.default_rng(2024)
    kinds = ("CE", "KL", "TRADES", "RWP")
    start = time.perf_counter()
    checked = {k: 0 for k in kinds}
    worst = 0.0
    skipped = 0
    attempts = 0
    while min(checked.values()) < 60 and attempts < 2000:
        kind = kinds[attempts % len(kinds)]
        attempts += 1
        fn, inputs = _gradient_case(kind, rng)
        rep = ad.finite_diff_check(fn, inputs, h=1e-5, tol=1e-4)
        if rep.skipped_kink:
            skipped += 1
            continue
        checked[kind] += 1
        worst = max(worst, rep.max_rel_error)
    elapsed = time.perf_counter() - start
    total = sum(checked.values())
    passed = total >= 200 and worst <= 1e-4 and elapsed < 60
    report(1, "gradient suite", passed, f"{total} cases {checked}, max rel err {worst:.2e}, {skipped} kink skips, {elapsed:.1f}s")
    assert passed


# ---------------------------------------------------------------- criterion 2

def test_criterion_2_constraint_suite():
    rng = np.random.default_rng(7)
    cases = 10_000
    worst_norm = 0.0
    worst_ball = 0.0
    box_violations = 0
    perturb_cases = 0
    for i in range(cases):
        model = random_model(rng)
        x, _, y = random_batch(rng, model)
        if i % 2 == 0:
            norm = str(rng.choice(["linf", "l2"]))
            eps = float(rng.uniform(0.0, 1.0))
            box = None if rng.random() < 0.5 else (-1.5, 1.5)
            cfg = AttackConfig(
                norm=norm,
                epsilon=eps,
                alpha=float(rng.uniform(0.01, 0.5)),
                steps=int(rng.integers(0, 6)),
                random_start=bool(rng.random() < 0.7),
                input_box=box,
            )
            if box is not None:
                x = np.clip(x, *box)
            if norm == "linf" and rng.random() < 0.2:
                adv = fgsm(model, x, y, cfg)
            else:
                adv = pgd(model, x, y, cfg, rng)
            d = (adv.x_adv - x).reshape(len(y), -1)
            size = np.abs(d).max(axis=1) if norm == "linf" else np.sqrt((d**2).sum(axis=1))
            if eps > 0:
                worst_ball = max(worst_ball, float(np.max(size / eps - 1.0)))
            elif np.any(size > 0):
                worst_ball = math.inf
            if box is not None and (adv.x_adv.min() < box[0] or adv.x_adv.max() > box[1]):
                box_violations += 1
        else:
            _, x_adv, _ = random_batch(rng, model, n=len(y))
            cfg = PerturbConfig(
                gamma=float(rng.uniform(1e-4, 0.5)),
                steps=int(rng.integers(1, 4)),
                c_min=float(rng.choice([0.5, 1.0, 2.0, math.inf])),
            )
            state = rwp_generate(model, PerturbBatch(x, x_adv, y), cfg)
            if state.steps_taken:
                perturb_cases += 1
                target = cfg.gamma * model.weight_norm()
                worst_norm = max(worst_norm, abs(np.linalg.norm(state.v) - target) / target)
    passed = worst_ball <= 1e-9 and worst_norm <= 1e-9 and box_violations == 0
    report(
        2,
        "constraint suite",
        passed,
        f"{cases} cases ({perturb_cases} perturbations), max ball excess {worst_ball:.1e}, max norm rel err {worst_norm:.1e}",
    )
    assert passed


# ---------------------------------------------------------------- criterion 3

def _trajectory(perturb, steps=100):
    ds = gen_synthetic("moons", 400, 0.15, seed=3)
    model = init_weights(ArchSpec("mlp2", 2, 2, width=16), seed=8)
    cfg = TrainConfig(
        batch_size=32,
        lr=0.05,
        attack=AttackConfig(epsilon=0.2, alpha=0.05, steps=5),
        perturb=perturb,
        seed=5,
    )
    rng = np.random.default_rng(cfg.seed)
    opt = SGDState()
    history = []
    n = len(ds.y_train)
    for step in range(steps):
        idx = np.arange(step * 32, step * 32 + 32) % n
        train_step(model, ds.x_train[idx], ds.y_train[idx], cfg, opt, rng)
        history.append(model.weights.tobytes())
    return history


def test_criterion_3_mode_equivalence():
    at = _trajectory(PerturbConfig(mode="AT"))
    rwp0 = _trajectory(PerturbConfig(mode="RWP", c_min=0.0, gamma=0.01, steps=10))
    awp = _trajectory(PerturbConfig(mode="AWP", gamma=0.01, steps=3))
    rwp_inf = _trajectory(PerturbConfig(mode="RWP", c_min=math.inf, gamma=0.01, steps=3))
    same_at = sum(a == b for a, b in zip(at, rwp0))
    same_awp = sum(a == b for a, b in zip(awp, rwp_inf))
    distinct = at[-1] != awp[-1]
    passed = same_at == 100 and same_awp == 100 and distinct
    report(3, "mode equivalence", passed, f"RWP(0)=AT on {same_at}/100 steps, RWP(inf)=AWP on {same_awp}/100 steps")
    assert passed


# ---------------------------------------------------------------- criterion 4

def test_criterion_4_direction_invariance():
    rng = np.random.default_rng(11)
    exponents = (-40, -17, -7, -1, 1, 2, 9, 33)
    mismatches = 0
    trials = 0
    worst_arbitrary = 0.0
    for _ in range(60):
        model = random_model(rng)
        x, x_adv, y = random_batch(rng, model, n=8)
        batch = PerturbBatch(x, x_adv, y)
        mask = rng.random(8) < 0.7
        mask[0] = True
        gamma = float(rng.uniform(1e-3, 0.1))
        base = rwp_step(PerturbedView(model), batch, mask, gamma)
        for k in exponents:
            trials += 1
            scaled = rwp_step(PerturbedView(model), batch, mask, gamma, grad_scale=2.0**k)
            mismatches += scaled.tobytes() != base.tobytes()
        # the same scaling entering through the reduction weights (sum vs 1/n mean)
        summed = PerturbBatch(x, x_adv, y, weights=np.ones(8))
        trials += 1
        mismatches += rwp_step(PerturbedView(model), summed, mask, gamma).tobytes() != base.tobytes()
        c = float(rng.uniform(1e-3, 1e3))
        other = rwp_step(PerturbedView(model), batch, mask, gamma, grad_scale=c)
        worst_arbitrary = max(worst_arbitrary, float(np.max(np.abs(other - base)) / np.max(np.abs(base))))
    passed = mismatches == 0 and worst_arbitrary < 1e-14
    report(
        4,
        "direction invariance",
        passed,
        f"{trials - mismatches}/{trials} exactly-representable scalings bitwise equal; "
        f"arbitrary constants within {worst_arbitrary:.1e} relative",
    )
    assert passed


# ---------------------------------------------------------------- criterion 5

def test_criterion_5_early_break():
    rng = np.random.default_rng(5)
    failures = 0
    i = 0
    while i < 200:
        model = random_model(rng, scale=2.0)
        x, x_adv, y = random_batch(rng, model, n=6)
        batch = PerturbBatch(x, x_adv, y)
        losses = ce_loss_fn(PerturbedView(model), batch).data
        if losses.min() == 0.0:
            continue  # no nonnegative c_min lies strictly below a zero loss
        i += 1
        c_min = float(losses.min()) * 0.5
        lsc = None if i % 2 else LSCRange(0.0, c_min)
        state = rwp_generate(model, batch, PerturbConfig(c_min=c_min, steps=10, gamma=0.05, lsc_range=lsc))
        failures += bool(state.steps_taken != 0 or np.any(state.v != 0) or state.v.shape != model.weights.shape)
    passed = failures == 0
    report(5, "early break", passed, f"{200 - failures}/200 batches returned v = 0 with 0 steps")
    assert passed


# ---------------------------------------------------------------- criterion 6

TREND_SEEDS = (0, 1, 2, 3, 4)
TREND_WIDTH = 256
TREND_BATCH = 64
TREND_PERTURB = PerturbConfig(mode="RWP", gamma=0.005, steps=10, c_min=1.7)


def trend_config(seed: int, perturb: PerturbConfig) -> TrainConfig:
    return TrainConfig(
        epochs=30,
        batch_size=TREND_BATCH,
        lr=0.1,
        lr_milestones=(15, 23),
        seed=seed,
        attack=AttackConfig(norm="linf", epsilon=0.1, alpha=0.01, steps=10),
        eval_attack=AttackConfig(norm="linf", epsilon=0.1, alpha=0.01, steps=20),
        perturb=perturb,
        eval_train_count=200,
    )


@pytest.mark.slow
def test_criterion_6_robust_overfitting_trend():
    ds = load_mnist(DATA, 1000, 1000)
    arch = ArchSpec("mlp2", ds.in_dim, ds.class_count, width=TREND_WIDTH)
    start = time.perf_counter()
    gaps = {"AT": [], "RWP": []}
    lasts = {"AT": [], "RWP": []}
    for seed in TREND_SEEDS:
        for name, perturb in (("AT", PerturbConfig(mode="AT")), ("RWP", TREND_PERTURB)):
            rec = train(init_weights(arch, seed), ds, trend_config(seed, perturb))
            gaps[name].append(rec.overfit_gap)
            lasts[name].append(rec.last_rob_acc)
    elapsed = time.perf_counter() - start
    med_gap = {k: float(np.median(v)) for k, v in gaps.items()}
    med_last = {k: float(np.median(v)) for k, v in lasts.items()}
    passed = med_gap["RWP"] <= med_gap["AT"] and med_last["RWP"] >= med_last["AT"] and elapsed <= 900
    report(
        6,
        "robust overfitting trend",
        passed,
        f"median gap AT {med_gap['AT']:.4f} RWP {med_gap['RWP']:.4f}; "
        f"median last AT {med_last['AT']:.4f} RWP {med_last['RWP']:.4f}; {elapsed:.0f}s",
    )
    assert passed


# ---------------------------------------------------------------- criterion 7

ABLATION_SEEDS = (0, 1, 2, 3, 4)
ABLATION_C_MIN = (0.0, 0.3, 1.0, math.inf)


def ablation_setup(seed: int):
    ds = gen_synthetic("moons", 1000, 0.25, seed=seed, test_fraction=0.9)
    arch = ArchSpec("mlp2", 2, 2, width=128)
    cfg = TrainConfig(
        epochs=60,
        batch_size=32,
        lr=0.1,
        lr_milestones=(30, 45),
        seed=seed,
        attack=AttackConfig(epsilon=0.2, alpha=0.05, steps=10),
        eval_attack=AttackConfig(epsilon=0.2, alpha=0.05, steps=20),
        perturb=PerturbConfig(gamma=0.02, steps=10, c_min=1.0),
    )
    return ds, arch, cfg


@pytest.mark.slow
def test_criterion_7_c_min_ablation_shape():
    # ranked by final-epoch robust accuracy; the best checkpoint would hide
    # the robust overfitting that separates the sweep endpoints
    interior = 0
    interior_by_best = 0
    argmaxes = []
    for seed in ABLATION_SEEDS:
        ds, arch, cfg = ablation_setup(seed)
        result = run_ablation(cfg, arch, ds, "c_min", list(ABLATION_C_MIN))
        last = [result.records[c].last_rob_acc for c in ABLATION_C_MIN]
        best = [result.records[c].best_rob_acc for c in ABLATION_C_MIN]
        k = int(np.argmax(last))
        argmaxes.append(ABLATION_C_MIN[k])
        interior += 0 < k < len(ABLATION_C_MIN) - 1
        interior_by_best += 0 < int(np.argmax(best)) < len(ABLATION_C_MIN) - 1
    passed = interior >= 3
    report(
        7,
        "c_min ablation shape",
        passed,
        f"interior best in {interior}/5 seeds (by best checkpoint {interior_by_best}/5), argmax c_min per seed {argmaxes}",
    )
    assert passed


# ---------------------------------------------------------------- criterion 8

def test_criterion_8_trades_reductions():
    ds = gen_synthetic("gaussians", 300, 1.0, seed=2, class_count=3)
    model = init_weights(ArchSpec("mlp2", 2, 3, width=12), seed=4)
    ref = model.copy()
    cfg = TrainConfig(
        batch_size=25,
        lr=0.05,
        loss=LossSpec(kind="TRADES", beta=0.0),
        perturb=PerturbConfig(mode="AT"),
        attack=AttackConfig(epsilon=0.3, alpha=0.1, steps=3),
    )
    rng = np.random.default_rng(0)
    opt = SGDState()
    buf = None
    equal_steps = 0
    for step in range(60):
        idx = np.arange(step * 25, step * 25 + 25) % len(ds.y_train)
        x, y = ds.x_train[idx], ds.y_train[idx]
        train_step(model, x, y, cfg, opt, rng)
        w = ref.params(requires_grad=True)
        g = ad.gradient((cross_entropy(ref.forward(x, w), y) * np.full(25, 1 / 25)).sum(), w)
        d = g + cfg.weight_decay * ref.weights
        buf = d.copy() if buf is None else cfg.momentum * buf + d
        ref.weights = ref.weights - cfg.lr * buf
        equal_steps += model.weights.tobytes() == ref.weights.tobytes()

    krng = np.random.default_rng(1)
    nonzero_kl = 0
    for scale in (1e-3, 1.0, 10.0, 300.0):
        logits = scale * krng.normal(size=(200, 7))
        nonzero_kl += int(np.count_nonzero(kl_div(logits, logits).data))
    passed = equal_steps == 60 and nonzero_kl == 0
    report(8, "TRADES reductions", passed, f"beta=0 equals CE on {equal_steps}/60 steps; {nonzero_kl} nonzero self-KL values")
    assert passed


# ---------------------------------------------------------------- criterion 9

def _random_run_config(rng) -> RunConfig:
    attack = AttackConfig(
        norm=str(rng.choice(["linf", "l2"])),
        epsilon=float(rng.uniform(0, 1)),
        alpha=float(rng.uniform(1e-3, 1)),
        steps=int(rng.integers(0, 30)),
        random_start=bool(rng.random() < 0.5),
        input_box=None if rng.random() < 0.5 else (0.0, 1.0),
    )
    lsc = None if rng.random() < 0.5 else LSCRange(float(rng.uniform(0, 1)), math.inf)
    perturb = PerturbConfig(
        gamma=float(rng.uniform(0, 0.1)),
        steps=int(rng.integers(0, 20)),
        c_min=float(rng.choice([rng.uniform(0, 5), math.inf])),
        mode=str(rng.choice(["AT", "AWP", "RWP"])),
        lsc_range=lsc,
    )
    m = int(rng.integers(1, 100))
    train_cfg = TrainConfig(
        epochs=int(rng.integers(0, 300)),
        batch_size=int(rng.integers(1, 512)),
        lr=float(rng.uniform(1e-4, 1)),
        lr_milestones=(m, m + int(rng.integers(1, 100))),
        seed=int(rng.integers(2**40)),
        attack=attack,
        eval_attack=dataclasses.replace(attack, steps=int(rng.integers(0, 50))),
        perturb=perturb,
        loss=LossSpec(kind=str(rng.choice(["CE", "TRADES", "RST"])), beta=float(rng.uniform(0, 10))),
    )
    return RunConfig(DataConfig(kind="moons", n=int(rng.integers(10, 5000))), ModelConfig(width=int(rng.integers(1, 512))), train_cfg)


def test_criterion_9_io_suite(tmp_path):
    rng = np.random.default_rng(9)
    config_ok = all(loads(dumps(cfg)) == cfg for cfg in (_random_run_config(rng) for _ in range(300)))

    csv_ok = True
    for trial in range(20):
        rows = [
            EpochRow(
                epoch=e,
                lr=float(rng.uniform()),
                train_nat_acc=float(rng.uniform()),
                train_rob_acc=float(rng.uniform()),
                test_nat_acc=float(rng.uniform()),
                test_rob_acc=float(rng.uniform()),
                mean_adv_loss=float(rng.exponential() * 10.0 ** rng.integers(-8, 8)),
                perturb_steps=int(rng.integers(0, 1000)),
                lsc_hist=tuple(int(c) for c in rng.integers(0, 999, size=6)),
            )
            for e in range(1, int(rng.integers(0, 40)) + 1)
        ]
        path = tmp_path / f"m{trial}.csv"
        write_metrics_csv(rows, path)
        csv_ok &= read_metrics_csv(path) == rows

    fuzz = corpus(seed=9)
    rejected = 0
    target = tmp_path / "fuzz"
    for _, blob in fuzz:
        target.write_bytes(blob)
        try:
            read_idx(target, IMAGE_MAGIC)
        except FormatError:
            rejected += 1
    series = [(name, read_metrics_csv(tmp_path / f"m{i}.csv")) for i, name in enumerate(("AT", "AWP", "RWP"))]
    series = [(n, r) for n, r in series if r] or [("AT", rows)]
    svg_ok = render_curves_svg(series).encode() == render_curves_svg(series).encode()

    passed = config_ok and csv_ok and rejected == len(fuzz) and svg_ok
    report(
        9,
        "IO suite",
        passed,
        f"config round-trip {config_ok}, CSV round-trip {csv_ok}, IDX fuzz rejected {rejected}/{len(fuzz)}, SVG deterministic {svg_ok}",
    )
    assert passed
