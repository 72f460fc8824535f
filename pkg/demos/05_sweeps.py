"""
Step-size and step-count sweeps
===============================

PGD with step tau against WITCHcraft with expected step a = tau, on matched
seeds, over a grid of step sizes and then of step counts. Results go to CSV
files with one row per trial plus a plot-data file per sweep.
"""

import tempfile
from pathlib import Path

from witchcraft.bench import emit_report, sweep_expected_step, sweep_steps
from witchcraft.data import synthetic_blobs
from witchcraft.models import AdversarialConfig, TrainConfig, adversarial_train, build_model

data = synthetic_blobs(classes=4, dims=8, count=800, seed=1, spread=0.08)
test = synthetic_blobs(classes=4, dims=8, count=300, seed=2, spread=0.08)
model = adversarial_train(
    build_model("mlp-small", 0, input_shape=(8,), num_classes=4, hidden=32), data,
    TrainConfig(epochs=10, batch_size=20, lr=0.2, adversarial=AdversarialConfig(0.1, 7, 0.03)),
)

out = Path(tempfile.mkdtemp())
by_step = sweep_expected_step(model, test, [0.005, 0.01, 0.02, 0.04], steps=20, trials=3, budget=0.15)
for path in emit_report(by_step, out / "step_size.csv"):
    print(f"--- {path.name}")
    print(path.read_text() if "plot" in path.name else path.read_text().splitlines()[1])

by_n = sweep_steps(model, test, [5, 20, 60], step=0.01, trials=3, budget=0.15)
main, plot = emit_report(by_n, out / "steps.csv")
print(f"--- {plot.name}")
print(plot.read_text())
print("paired one-sided p-values (witchcraft < pgd):", by_step.paired_test().round(3))
