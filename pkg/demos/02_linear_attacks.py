"""
Attacks on a linear classifier
==============================

For a two-class linear model the loss depends on the input only through the
margin, so the strongest perturbation in an l-infinity box sits on a corner
of the box. That makes a clean oracle: enumerate all corners and compare.
"""

import itertools

import numpy as np

from witchcraft.attacks import PerturbationBudget, cross_entropy, fgsm, pgd, witchcraft
from witchcraft.network import Layer, Model, logits
from witchcraft.tensor import Tensor

rng = np.random.default_rng(3)
d = 6
w = rng.normal(size=d)
model = Model((Layer("dense", (Tensor(np.stack([w, np.zeros(d)], axis=1)), Tensor([1.0, 0.0]))),), (d,), 2)

x = rng.uniform(0.2, 0.8, d)
budget = PerturbationBudget(epsilon=0.1)  # pixels stay in [0, 1]

lo, hi = budget.bounds(x)
corners = np.array(list(itertools.product(*zip(lo, hi))))
best = cross_entropy(logits(model, x + corners), np.zeros(len(corners), dtype=int)).max()
print(f"best corner loss {best:.6f}")

for name, res in [
    ("fgsm", fgsm(model, x, 0, budget)),
    ("pgd, 5 steps", pgd(model, x, 0, budget, 0.1, 5)),
    ("witchcraft, 40 steps", witchcraft(model, x, 0, budget, 0.1, 40, early_stop=False)),
]:
    print(f"{name:22s} loss {res.final_loss[0]:.6f}  fooled={res.success[0]}")

# WITCHcraft draws a fresh random step per coordinate at every update.
# With the spread turned off it is plain PGD, bit for bit.
a = witchcraft(model, x, 0, budget, 0.03, 10, jitter=0.0, early_stop=False, seed=1)
b = pgd(model, x, 0, budget, 0.03, 10, seed=1)
print("zero-spread witchcraft == pgd:", np.array_equal(a.delta, b.delta))
