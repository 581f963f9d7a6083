"""
Robust overfitting on an MNIST subset
=====================================

Adversarial training on 1000 MNIST digits with a two-hidden-layer network,
with and without robust weight perturbation. The learning-rate drop at
epoch 15 is where test robustness usually stops improving while training
robustness keeps climbing.

This takes a few minutes on a laptop CPU.
"""

from pathlib import Path

from rwplab import (
    ArchSpec,
    AttackConfig,
    PerturbConfig,
    TrainConfig,
    emit_curves_svg,
    init_weights,
    load_mnist,
    train,
)

ROOT = Path(__file__).resolve().parents[1]
data = load_mnist(ROOT / "data", train_count=1000, test_count=1000)
arch = ArchSpec("mlp2", data.in_dim, data.class_count, width=256)

base = TrainConfig(
    epochs=30,
    batch_size=64,
    lr=0.1,
    lr_milestones=(15, 23),
    attack=AttackConfig(epsilon=0.1, alpha=0.01, steps=10),
    eval_attack=AttackConfig(epsilon=0.1, alpha=0.01, steps=20),
    eval_train_count=200,
)

###############################################################################
# Plain adversarial training and the gated weight perturbation. The gate
# ``c_min`` restricts the perturbation to adversarial examples whose loss is
# already small, which is where the network starts to memorize.

runs = {
    "AT": PerturbConfig(mode="AT"),
    "RWP": PerturbConfig(mode="RWP", gamma=0.005, steps=10, c_min=1.7),
}
records = []
for label, perturb in runs.items():
    rec = train(init_weights(arch, seed=0), data, base.replace(perturb=perturb), label=label)
    records.append(rec)
    print(f"{label:4s} best {rec.best_rob_acc:.3f} (epoch {rec.best.epoch})  last {rec.last_rob_acc:.3f}")

###############################################################################
# Per-epoch test robust accuracy, written as a standalone SVG.

out = Path("robust_overfitting.svg")
emit_curves_svg(records, out)
print("wrote", out)

###############################################################################
# The loss-stationary-condition histogram shows how the training adversarial
# losses spread over the bins [0, 0.5), [0.5, 1), ... as training goes on.

for row in records[0].rows[::5]:
    print(row.epoch, row.lsc_hist)
