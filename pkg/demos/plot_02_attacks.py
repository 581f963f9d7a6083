"""
FGSM and PGD on two moons
=========================

A small network is adversarially trained on the two-moons problem, then
attacked with single-step and multi-step attacks under both threat models.
"""

import numpy as np

from rwplab import (
    AttackConfig,
    ArchSpec,
    PerturbConfig,
    TrainConfig,
    evaluate_robustness,
    gen_synthetic,
    init_weights,
    natural_accuracy,
    train,
)

data = gen_synthetic("moons", 600, noise=0.1, seed=0)
model = init_weights(ArchSpec("mlp2", 2, 2, width=32), seed=0)

###############################################################################
# PGD-10 adversarial training in the l-inf ball of radius 0.15.

attack = AttackConfig(norm="linf", epsilon=0.15, alpha=0.04, steps=10)
cfg = TrainConfig(
    epochs=20,
    batch_size=32,
    lr=0.05,
    lr_milestones=(10, 15),
    attack=attack,
    eval_attack=AttackConfig(norm="linf", epsilon=0.15, alpha=0.04, steps=20),
    perturb=PerturbConfig(mode="AT"),
)
record = train(model, data, cfg, label="AT")
print(f"best epoch {record.best.epoch}, robust accuracy {record.best_rob_acc:.3f}")

###############################################################################
# Robust accuracy falls as the attack gets stronger. The l2 ball of the same
# radius is contained in the l-inf ball, so it is the weaker threat model.

x, y = data.x_test, data.y_test
print(f"natural        {natural_accuracy(model, x, y):.3f}")
print(f"FGSM   l-inf   {evaluate_robustness(model, x, y, attack, method='fgsm'):.3f}")
for steps in (1, 10, 50):
    linf = AttackConfig(norm="linf", epsilon=0.15, alpha=0.04, steps=steps)
    l2 = AttackConfig(norm="l2", epsilon=0.15, alpha=0.04, steps=steps)
    print(
        f"PGD-{steps:<3d} l-inf {evaluate_robustness(model, x, y, linf):.3f}"
        f"   l2 {evaluate_robustness(model, x, y, l2):.3f}"
    )

###############################################################################
# Every adversarial example stays inside its ball.

from rwplab.attacks import pgd  # noqa: E402

adv = pgd(model, x, y, attack, np.random.default_rng(0))
print(f"max |x' - x|_inf: {np.abs(adv.x_adv - x).max():.6f}")
