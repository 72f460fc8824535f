"""
Natural and adversarial training
================================

Train an MLP on blobs, then train a twin whose minibatches are first
replaced by their PGD perturbations, and compare both under attack.
Weights go through the binary weight file on the way.
"""

import tempfile
from pathlib import Path

from witchcraft.attacks import AttackConfig
from witchcraft.bench import eval_robust_accuracy
from witchcraft.data import synthetic_blobs
from witchcraft.models import AdversarialConfig, TrainConfig, adversarial_train, build_model
from witchcraft.models import load_weights, save_weights, train_sgd

data = synthetic_blobs(classes=4, dims=8, count=800, seed=1, spread=0.08)
test = synthetic_blobs(classes=4, dims=8, count=400, seed=2, spread=0.08)
start = build_model("mlp-small", seed=0, input_shape=(8,), num_classes=4, hidden=32)

natural = train_sgd(start, data, TrainConfig(epochs=10, batch_size=20, lr=0.2))
robust = adversarial_train(
    start, data,
    TrainConfig(epochs=10, batch_size=20, lr=0.2, adversarial=AdversarialConfig(epsilon=0.1, steps=7, step_size=0.03)),
)

path = Path(tempfile.mkdtemp()) / "robust.wts"
save_weights(robust, path)
robust = load_weights(path)
print(f"weight file: {path.stat().st_size} bytes")

attack = AttackConfig("pgd", step=0.01, steps=20)
for name, model in [("natural", natural), ("adversarial", robust)]:
    r = eval_robust_accuracy(model, test, attack, 0.1)
    print(f"{name:12s} clean {r.clean_acc:.3f}  robust {r.robust_acc:.3f}")
