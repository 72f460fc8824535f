"""Quick oracle and invariant checks, runnable without a test runner.

Each check returns a :class:`Check`; :func:`run_all` runs them in order.
The checks are small versions of the library's test suite: gradients against
central differences, attacks on linear models against brute force over the
budget corners, the zero-variance WITCHcraft/PGD equivalence, budget
feasibility, and IDX and weight-file round trips.
"""

from __future__ import annotations

import itertools
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attacks import PerturbationBudget, cross_entropy, fgsm, pgd, witchcraft
from .data import BadMagicError, TruncatedError, load_idx_images, load_idx_labels
from .models import build_model, load_weights, save_weights
from .network import Layer, Model, forward, grad_input, logits
from .tensor import Tensor, softmax_cross_entropy

__all__ = ["Check", "CHECKS", "run_all"]


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def _central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros(x.size)
    flat = x.reshape(-1)
    for i in range(x.size):
        e = np.zeros_like(flat)
        e[i] = h
        g[i] = (f((flat + e).reshape(x.shape)) - f((flat - e).reshape(x.shape))) / (2 * h)
    return g.reshape(x.shape)


def gradients(models: int = 6, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(models):
        arch = ("mlp-small", "cnn-2conv")[k % 2]
        m = build_model(arch, k, input_shape=(4, 4, 2), hidden=6, widths=(2, 3), num_classes=3, dtype=np.float64)
        x = rng.uniform(0, 1, (1, 4, 4, 2))
        y = rng.integers(0, 3, 1)
        got = grad_input(m, x, y)
        want = _central_difference(lambda v: float(softmax_cross_entropy(forward(m, v), y).data.sum()), x)
        err = np.linalg.norm(got - want) / max(np.linalg.norm(want), 1e-12)
        worst = max(worst, err)
    return Check("gradients", worst <= 1e-4, f"max relative error {worst:.2e} over {models} models")


def _logistic(w: np.ndarray) -> Model:
    dense = Layer("dense", (Tensor(np.stack([w, np.zeros_like(w)], axis=1)), Tensor(np.zeros(2))))
    return Model((dense,), (len(w),), 2, "linear")


def linear_oracle(models: int = 5, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    eps = 0.1
    budget = PerturbationBudget(eps, -1e6, 1e6)  # pixel range never binds
    worst = 0.0
    for k in range(models):
        d = 2 + k % 5
        m = _logistic(rng.normal(size=d))
        # shift the clean point away from the boundary so early stopping never fires
        x = 5.0 * np.sign(m.layers[0].params[0].data[:, 0]) / np.abs(m.layers[0].params[0].data[:, 0]).sum()
        corners = np.array(list(itertools.product([-eps, eps], repeat=d)))
        best = cross_entropy(logits(m, x + corners), np.zeros(len(corners), dtype=int)).max()
        for res in (fgsm(m, x, 0, budget), pgd(m, x, 0, budget, eps, 5), witchcraft(m, x, 0, budget, eps, 40, seed=k)):
            got = cross_entropy(logits(m, x + res.delta), np.zeros(1, dtype=int))[0]
            worst = max(worst, abs(best - got))
    return Check("linear corner oracle", worst <= 1e-6, f"max loss gap {worst:.2e} over {models} models")


def zero_variance(models: int = 2, steps: int = 20) -> Check:
    same = True
    for k in range(models):
        m = build_model("cnn-2conv", k, input_shape=(8, 8, 1), widths=(2, 3), num_classes=4)
        x = np.random.default_rng(k).random((3, 8, 8, 1)).astype(np.float32)
        y = np.arange(3) % 4
        b = PerturbationBudget(0.3)
        tw, tp = [], []
        witchcraft(m, x, y, b, 0.02, steps, jitter=0.0, early_stop=False, seed=k,
                   on_step=lambda i, a, d: tw.append(d.copy()))
        pgd(m, x, y, b, 0.02, steps, seed=k, on_step=lambda i, a, d: tp.append(d.copy()))
        same &= len(tw) == len(tp) == steps and all(np.array_equal(p, q) for p, q in zip(tw, tp))
    return Check("zero-variance equivalence", same, f"{models} models x {steps} steps bit-identical" if same else "trajectories differ")


def feasibility(steps: int = 500, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    m = build_model("mlp-small", seed, input_shape=(10,), num_classes=3, hidden=8)
    violations = checked = 0
    while checked < steps:
        eps = float(rng.uniform(0.01, 0.5))
        b = PerturbationBudget(eps)
        x = rng.choice([0.0, 1.0, 0.5, 0.01, 0.99], size=(5, 10))
        bad = []

        def probe(k, active, delta, x=x, b=b, bad=bad):
            bad.extend(not b.contains(x[i], d) for i, d in zip(active, delta))

        witchcraft(m, x, rng.integers(0, 3, 5), b, float(rng.uniform(0.001, 0.5)), 10, early_stop=False,
                   seed=int(rng.integers(1 << 30)), on_step=probe)
        violations += sum(bad)
        checked += len(bad)
    return Check("feasibility", violations == 0, f"{violations} violations in {checked} steps")


def idx_fixtures() -> Check:
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        (tmp / "img").write_bytes(struct.pack(">IIII", 0x803, 1, 1, 2) + bytes([0, 255]))
        (tmp / "lbl").write_bytes(struct.pack(">II", 0x801, 2) + bytes([3, 7]))
        (tmp / "bad").write_bytes(struct.pack(">IIII", 0x801, 1, 1, 2) + bytes([0, 255]))
        (tmp / "short").write_bytes(struct.pack(">IIII", 0x803, 1, 1, 2) + bytes([0]))
        ok = load_idx_images(tmp / "img").tolist() == [[[0, 255]]]
        ok &= load_idx_labels(tmp / "lbl").tolist() == [3, 7]
        for name, err in (("bad", BadMagicError), ("short", TruncatedError)):
            try:
                load_idx_images(tmp / name)
                ok = False
            except err:
                pass
    return Check("idx fixtures", ok, "parsed values and error kinds as constructed")


def weight_roundtrip() -> Check:
    m = build_model("cnn-2conv", 3, input_shape=(8, 8, 1), widths=(2, 3))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.wts"
        save_weights(m, path)
        back = load_weights(path)
    ok = all(np.array_equal(a.data, b.data) for a, b in zip(m.parameters(), back.parameters()))
    return Check("weight round trip", ok, "parameters bit-identical" if ok else "parameters differ")


CHECKS = (gradients, linear_oracle, zero_variance, feasibility, idx_fixtures, weight_roundtrip)


def run_all(echo=print) -> bool:
    passed = True
    for check in CHECKS:
        try:
            result = check()
        except Exception as exc:  # report, keep going
            result = Check(check.__name__, False, f"{type(exc).__name__}: {exc}")
        echo(result.line())
        passed &= result.passed
    return passed
