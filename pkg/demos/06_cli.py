"""
The command line
================

The same workflow through the ``witchcraft`` command (also
``python -m witchcraft``). Here it is driven in-process on a small IDX
dataset so the script runs anywhere; swap in a real MNIST directory for
the full experiment.
"""

import tempfile
from pathlib import Path

import numpy as np

from witchcraft.cli import main
from witchcraft.data import write_idx_images, write_idx_labels

tmp = Path(tempfile.mkdtemp())
rng = np.random.default_rng(0)
for split, n in (("train", 300), ("t10k", 100)):
    labels = np.arange(n) % 10
    images = rng.integers(0, 40, (n, 12, 12)).astype(np.uint8)
    images[np.arange(n), labels] = 230  # the class lights up one row
    write_idx_images(tmp / f"{split}-images-idx3-ubyte", images)
    write_idx_labels(tmp / f"{split}-labels-idx1-ubyte", labels)

main(["train", "--arch", "cnn-2conv", "--data-dir", str(tmp), "--epochs", "3", "--lr", "0.1",
      "--adversarial", "--eps", "0.1", "--adv-step-size", "0.03", "--weights-out", str(tmp / "m.wts")])

# Flags can live in a key = value file; the command line still wins.
(tmp / "attack.cfg").write_text(f"weights = {tmp / 'm.wts'}\ndata-dir = {tmp}\neps = 0.25\nstep = 0.03\n")
main(["attack", "--config", str(tmp / "attack.cfg"), "--family", "witchcraft", "--steps", "20", "--csv-out", str(tmp / "a.csv")])
print((tmp / "a.csv").read_text())

main(["sweep-steps", "--config", str(tmp / "attack.cfg"), "--grid", "5,10,20", "--trials", "2",
      "--csv-out", str(tmp / "n.csv")])
