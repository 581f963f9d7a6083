"""
Checking reverse-mode gradients
===============================

Every loss in the package is built from a handful of recorded operations.
Here we trace a small classifier, differentiate it, and compare the result
with central differences.
"""

import numpy as np

from rwplab import autodiff as ad
from rwplab.losses import LossSpec, cross_entropy, trades_loss
from rwplab.models import ArchSpec, init_weights

rng = np.random.default_rng(0)
model = init_weights(ArchSpec("mlp2", in_dim=4, class_count=3, width=6), seed=1)
x = rng.normal(size=(5, 4))
x_adv = x + rng.uniform(-0.1, 0.1, size=x.shape)
y = rng.integers(0, 3, size=5)

###############################################################################
# Cross-entropy as a function of the flat weight vector. ``Graph.trace``
# records the function once; ``evaluate`` replays it on new inputs.

def mean_ce(w):
    return cross_entropy(model.forward(x, w), y).mean()

graph = ad.Graph.trace(mean_ce, w=model.weights)
print("recorded ops:", len(graph.nodes))
print("loss:", ad.evaluate(graph, {"w": model.weights}).data)

###############################################################################
# Reverse mode against central differences, measured as the largest
# absolute deviation relative to the largest gradient entry.

report = ad.finite_diff_check(graph, {"w": model.weights})
print(f"CE      max relative error {report.max_rel_error:.2e} over {report.checked} entries")

spec = LossSpec(kind="TRADES", beta=6.0)
report = ad.finite_diff_check(
    lambda w, xa: trades_loss(model, x, xa, y, spec, params=w).mean(),
    {"w": model.weights, "xa": x_adv},
)
print(f"TRADES  max relative error {report.max_rel_error:.2e} over {report.checked} entries")
