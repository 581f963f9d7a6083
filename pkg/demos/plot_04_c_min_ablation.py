"""
Sweeping the loss gate
======================

``c_min = 0`` never perturbs the weights (plain adversarial training), and
``c_min = inf`` always does (adversarial weight perturbation). Values in
between perturb only on adversarial examples that are already fitted.
"""

import math

from rwplab import ArchSpec, AttackConfig, PerturbConfig, TrainConfig, gen_synthetic, run_ablation

data = gen_synthetic("moons", 1000, noise=0.25, seed=0, test_fraction=0.9)
arch = ArchSpec("mlp2", 2, 2, width=128)
cfg = TrainConfig(
    epochs=60,
    batch_size=32,
    lr=0.1,
    lr_milestones=(30, 45),
    attack=AttackConfig(epsilon=0.2, alpha=0.05, steps=10),
    eval_attack=AttackConfig(epsilon=0.2, alpha=0.05, steps=20),
    perturb=PerturbConfig(gamma=0.02, steps=10),
)

###############################################################################
# One run per gate value, all from the same initial weights. Plain
# adversarial training loses robustness late in training on this small,
# noisy training set, while perturbing on every example costs accuracy.

result = run_ablation(cfg, arch, data, "c_min", [0.0, 0.3, 1.0, math.inf])
print(result.format_table())
