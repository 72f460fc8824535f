"""Robust-accuracy evaluation, step-size and step-count sweeps, CSV reports.

Every example is attacked with RNG substreams keyed by its position in the
dataset, and attacked examples are processed in fixed-size chunks, so
results do not depend on the number of worker processes.
"""

from __future__ import annotations

import csv
import io
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .attacks import GRAD_COUNTER, AttackConfig, PerturbationBudget, run_attack
from .data import LabeledDataset
from .network import Model, predict_logits, logits
from .tensor import ShapeError

__all__ = [
    "CSV_HEADER",
    "RobustAccuracyReport",
    "SweepResult",
    "eval_robust_accuracy",
    "sweep_expected_step",
    "sweep_steps",
    "emit_report",
    "plot_path",
]

CSV_HEADER = (
    "attack", "steps", "step_param", "restarts", "epsilon", "seed",
    "examples", "clean_acc", "robust_acc", "grad_evals",
)

# families whose n-step run is exactly the first n updates of a longer run
_PREFIX_FAMILIES = ("pgd", "witchcraft")


@dataclass(frozen=True)
class RobustAccuracyReport:
    """Outcome of one attack configuration over a dataset.

    ``correct[i]`` says whether example ``i`` is classified correctly before
    the attack. ``first_success_step[i]`` is the 1-based update at which the
    attack first fooled the model, or -1 (also for examples that were already
    misclassified and therefore never attacked).
    """

    config: AttackConfig
    epsilon: float
    examples: int
    clean_acc: float
    robust_acc: float
    grad_evals: int
    correct: np.ndarray = field(repr=False)
    first_success_step: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not 0 <= self.robust_acc <= self.clean_acc <= 1:
            raise ValueError(f"inconsistent accuracies: robust {self.robust_acc}, clean {self.clean_acc}")

    @property
    def attack(self) -> str:
        return self.config.family

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def robust(self) -> np.ndarray:
        """Per-example mask: correct before the attack and never fooled."""
        return self.correct & (self.first_success_step < 0)

    def row(self) -> tuple:
        c = self.config
        steps, step = (1, self.epsilon) if c.family == "fgsm" else (c.steps, c.step)
        restarts = c.restarts if c.family == "pgd-restarts" else 1
        return (c.family, steps, _fmt(step), restarts, _fmt(self.epsilon), c.seed, self.examples,
                _fmt(self.clean_acc), _fmt(self.robust_acc), self.grad_evals)


def _fmt(v: float) -> str:
    return repr(float(v))


def _check(model: Model, dataset: LabeledDataset) -> None:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if dataset.images.shape[1:] != model.input_shape:
        raise ShapeError(f"dataset examples {dataset.images.shape[1:]} do not match model input {model.input_shape}")
    if dataset.class_count != model.num_classes:
        raise ShapeError(f"dataset has {dataset.class_count} classes, model {model.num_classes}")


def _clean_correct(model: Model, dataset: LabeledDataset, chunk: int) -> np.ndarray:
    x = dataset.images.astype(model.dtype, copy=False)
    pred = np.concatenate([predict_logits(logits(model, x[s : s + chunk])) for s in range(0, len(x), chunk)])
    return pred == dataset.labels


def _attack_chunk(args):
    model, x, y, budget, config, idx = args
    before = GRAD_COUNTER.count
    res = run_attack(model, x, y, budget, config, indices=idx)
    used = GRAD_COUNTER.count - before
    if used != int(res.grad_evals.sum()):
        raise AssertionError(f"gradient accounting mismatch: counter {used}, reported {res.grad_evals.sum()}")
    return res.first_success_step, res.success, used


def eval_robust_accuracy(
    model: Model,
    dataset: LabeledDataset,
    config: AttackConfig,
    budget: PerturbationBudget | float,
    *,
    workers: int = 1,
    chunk: int = 100,
) -> RobustAccuracyReport:
    """Robust accuracy of ``model`` on ``dataset`` under one attack.

    Only examples that are classified correctly are attacked; an example is
    robust iff it is correct and no recorded iterate of the attack
    misclassifies it. ``budget`` may be a bare epsilon (pixel range [0, 1]).
    """
    if not isinstance(budget, PerturbationBudget):
        budget = PerturbationBudget(float(budget))
    if workers < 1 or chunk < 1:
        raise ValueError("workers and chunk must be >= 1")
    _check(model, dataset)
    n = len(dataset)
    correct = _clean_correct(model, dataset, chunk)
    first = np.full(n, -1, dtype=np.int64)
    attacked = np.flatnonzero(correct)
    x = dataset.images.astype(model.dtype, copy=False)
    jobs = [
        (model, x[part], dataset.labels[part], budget, config, part)
        for part in (attacked[s : s + chunk] for s in range(0, len(attacked), chunk))
    ]
    if workers == 1 or len(jobs) <= 1:
        outcomes = map(_attack_chunk, jobs)
    else:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            outcomes = list(pool.map(_attack_chunk, jobs))
    evals = 0
    for (*_, part), (steps, success, used) in zip(jobs, outcomes):
        first[part] = np.where(success, steps, -1)
        evals += used
    robust = correct & (first < 0)
    return RobustAccuracyReport(
        config=config,
        epsilon=budget.epsilon,
        examples=n,
        clean_acc=correct.sum() / n,
        robust_acc=robust.sum() / n,
        grad_evals=evals,
        correct=correct,
        first_success_step=first,
    )


def _truncate(report: RobustAccuracyReport, steps: int) -> RobustAccuracyReport:
    """The report an otherwise identical ``steps``-step run would have produced."""
    c = report.config
    if c.family not in _PREFIX_FAMILIES or steps > c.steps:
        raise ValueError(f"cannot derive a {steps}-step {c.family} run from {c.steps} steps")
    hit = (report.first_success_step >= 1) & (report.first_success_step <= steps)
    first = np.where(hit, report.first_success_step, -1)
    if c.early_stop:
        evals = int(np.where(hit, first, steps)[report.correct].sum())
    else:
        evals = steps * int(report.correct.sum())
    return RobustAccuracyReport(
        config=replace(c, steps=steps),
        epsilon=report.epsilon,
        examples=report.examples,
        clean_acc=report.clean_acc,
        robust_acc=(report.correct & ~hit).sum() / report.examples,
        grad_evals=evals,
        correct=report.correct,
        first_success_step=first,
    )


@dataclass(frozen=True)
class SweepResult:
    """Reports over a grid of one attack parameter.

    ``reports[family][g][t]`` is trial ``t`` at ``grid[g]``; trial ``t``
    uses master seed ``seed + t`` for every family, so families are compared
    on matched initialisations.
    """

    param: str  # "step" or "steps"
    grid: tuple
    trials: int
    families: tuple[str, ...]
    reports: dict[str, list[list[RobustAccuracyReport]]]

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise ValueError(f"grid must be strictly increasing, got {self.grid}")

    def robust(self, family: str) -> np.ndarray:
        """(grid points, trials) robust accuracies."""
        return np.array([[r.robust_acc for r in point] for point in self.reports[family]])

    def mean(self, family: str) -> np.ndarray:
        return self.robust(family).mean(axis=1)

    def std(self, family: str) -> np.ndarray:
        return self.robust(family).std(axis=1, ddof=1) if self.trials > 1 else np.zeros(len(self.grid))

    def paired_test(self, lower: str = "witchcraft", higher: str = "pgd") -> np.ndarray:
        """One-sided paired t-test p-values for mean(lower) < mean(higher) per grid point.

        Points where every paired difference is identical have no variance to
        test against and get p = 1 unless the constant difference is negative.
        """
        a, b = self.robust(lower), self.robust(higher)
        p = np.ones(len(self.grid))
        for g in range(len(self.grid)):
            d = a[g] - b[g]
            if np.all(d == d[0]):
                p[g] = 0.0 if d[0] < 0 else 1.0
            else:
                p[g] = stats.ttest_rel(a[g], b[g], alternative="less").pvalue
        return p


def _check_grid(grid, trials: int) -> tuple:
    grid = tuple(grid)
    if not grid:
        raise ValueError("empty grid")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    return grid


def sweep_expected_step(
    model: Model,
    dataset: LabeledDataset,
    grid: Sequence[float],
    steps: int,
    trials: int,
    budget: PerturbationBudget | float,
    *,
    seed: int = 0,
    families: Sequence[str] = ("pgd", "witchcraft"),
    early_stop: bool = True,
    restarts: int = 1,
    workers: int = 1,
) -> SweepResult:
    """PGD with tau = a against WITCHcraft with expected step a, for each a in ``grid``."""
    grid = _check_grid(grid, trials)
    reports = {f: [] for f in families}
    for a in grid:
        for f in families:
            cfg = [AttackConfig(f, a, steps, restarts, early_stop, seed=seed + t) for t in range(trials)]
            reports[f].append([eval_robust_accuracy(model, dataset, c, budget, workers=workers) for c in cfg])
    return SweepResult("step", grid, trials, tuple(families), reports)


def sweep_steps(
    model: Model,
    dataset: LabeledDataset,
    grid: Sequence[int],
    step: float,
    trials: int,
    budget: PerturbationBudget | float,
    *,
    seed: int = 0,
    families: Sequence[str] = ("pgd", "witchcraft"),
    early_stop: bool = True,
    restarts: int = 1,
    workers: int = 1,
) -> SweepResult:
    """Robust accuracy against the number of attack steps.

    For pgd and witchcraft the longest run is computed once per trial and
    the shorter ones are read off its trajectory, which gives exactly the
    result of separate runs because the per-example random draws for the
    first n updates do not depend on the total step count.
    """
    grid = _check_grid(grid, trials)
    reports = {f: [[] for _ in grid] for f in families}
    for f in families:
        for t in range(trials):
            if f in _PREFIX_FAMILIES:
                full = eval_robust_accuracy(
                    model, dataset, AttackConfig(f, step, grid[-1], restarts, early_stop, seed=seed + t),
                    budget, workers=workers,
                )
                runs = [_truncate(full, n) for n in grid]
            else:
                runs = [
                    eval_robust_accuracy(model, dataset, AttackConfig(f, step, n, restarts, early_stop, seed=seed + t),
                                         budget, workers=workers)
                    for n in grid
                ]
            for g, r in enumerate(runs):
                reports[f][g].append(r)
    return SweepResult("steps", grid, trials, tuple(families), reports)


def plot_path(path) -> Path:
    """Where :func:`emit_report` puts the plot data for a sweep written to ``path``."""
    path = Path(path)
    return path.with_name(f"{path.stem}.plot{path.suffix or '.csv'}")


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def emit_report(result: RobustAccuracyReport | SweepResult, path) -> list[Path]:
    """Write the per-trial CSV (and, for sweeps, the plot-data CSV); returns the paths.

    The plot data has the swept value in the first column, then the mean
    robust accuracy for each family and the across-trial standard deviation
    in ``<family>_std`` columns.
    """
    path = Path(path)
    if isinstance(result, RobustAccuracyReport):
        path.write_text(_csv([CSV_HEADER, result.row()]))
        return [path]
    rows = [CSV_HEADER]
    for g in range(len(result.grid)):
        for f in result.families:
            rows += [r.row() for r in result.reports[f][g]]
    path.write_text(_csv(rows))
    header = [result.param, *result.families, *(f"{f}_std" for f in result.families)]
    means = [result.mean(f) for f in result.families]
    stds = [result.std(f) for f in result.families]
    plot = [header] + [
        [_fmt(x) if result.param == "step" else int(x), *(_fmt(m[g]) for m in means), *(_fmt(s[g]) for s in stds)]
        for g, x in enumerate(result.grid)
    ]
    plot_file = plot_path(path)
    plot_file.write_text(_csv(plot))
    return [path, plot_file]
