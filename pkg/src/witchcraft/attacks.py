"""L-infinity signed-gradient attacks: FGSM, PGD (with restarts), WITCHcraft
and targeted / multi-targeted PGD.

All attacks operate on batches ``x`` of shape (batch, *input_shape) with
integer labels ``y``; a single unbatched example is promoted to a batch of
one. Every example draws from its own random stream keyed by
``(seed, example index, *stream, restart[, target])`` so results do not
depend on how examples are grouped.

Success is scored on every recorded iterate (the perturbation after each
update): an example is attacked as soon as any iterate is misclassified.
``early_stop`` only skips the remaining updates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .network import Model, forward, loss_and_input_grad, predict_logits
from .rng import substreams
from .tensor import ShapeError

__all__ = [
    "FAMILIES",
    "PerturbationBudget",
    "AttackConfig",
    "AttackResult",
    "ExampleOutcome",
    "GradCounter",
    "GRAD_COUNTER",
    "project",
    "sample_init",
    "sample_step_field",
    "pgd",
    "pgd_restarts",
    "witchcraft",
    "fgsm",
    "targeted_step",
    "multi_targeted",
    "run_attack",
    "cross_entropy",
]

FAMILIES = ("fgsm", "pgd", "pgd-restarts", "witchcraft", "multi-targeted")


@dataclass(frozen=True)
class PerturbationBudget:
    """Permissible set: ``|delta_i| <= epsilon`` and ``x_i + delta_i`` inside the pixel range."""

    epsilon: float
    pixel_min: float = 0.0
    pixel_max: float = 1.0

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not self.pixel_min < self.pixel_max:
            raise ValueError("pixel_min must be < pixel_max")

    def bounds(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Coordinate-wise interval that ``delta`` may occupy around anchor ``x``."""
        x = np.asarray(x)
        dt = x.dtype if x.dtype.kind == "f" else np.float64
        eps = dt.type(self.epsilon)
        lo = np.maximum(-eps, dt.type(self.pixel_min) - x)
        hi = np.minimum(eps, dt.type(self.pixel_max) - x)
        # an anchor outside the pixel range would leave an empty interval
        return lo, np.maximum(lo, hi)

    def contains(self, x, delta) -> bool:
        x, delta = np.asarray(x), np.asarray(delta)
        eps = delta.dtype.type(self.epsilon) if delta.dtype.kind == "f" else self.epsilon
        adv = x + delta
        return bool(
            np.all(np.abs(delta) <= eps)
            and np.all(adv >= self.pixel_min)
            and np.all(adv <= self.pixel_max)
        )


@dataclass(frozen=True)
class AttackConfig:
    """Everything that selects an attack run besides the model and the data.

    ``step`` is the fixed step size for fgsm/pgd/pgd-restarts/multi-targeted
    and the expected step size for witchcraft. fgsm ignores ``step``,
    ``steps`` and ``random_init`` (it always takes one epsilon-sized step from
    the clean input).
    """

    family: str = "pgd"
    step: float = 0.01
    steps: int = 40
    restarts: int = 1
    early_stop: bool = False
    random_init: bool = True
    seed: int = 0
    jitter: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}; choose from {FAMILIES}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.family != "fgsm" and not self.step > 0:
            raise ValueError("step must be > 0")
        if not 0 <= self.jitter <= 1:
            raise ValueError("jitter must lie in [0, 1]")


@dataclass(frozen=True)
class ExampleOutcome:
    delta: np.ndarray
    success: bool
    first_success_step: int | None
    loss_trace: np.ndarray
    grad_evals: int
    final_loss: float
    target: int | None = None


@dataclass
class AttackResult:
    """Per-example attack outcomes for a batch.

    ``first_success_step`` holds the 1-based update index of the first
    misclassified iterate, or -1. ``loss_trace[i]`` has one objective value
    per executed update of example ``i``. ``final_loss`` is the true-label
    cross-entropy at the returned ``delta``.
    """

    delta: np.ndarray
    success: np.ndarray
    first_success_step: np.ndarray
    loss_trace: list[np.ndarray]
    grad_evals: np.ndarray
    final_loss: np.ndarray
    target: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.success)

    def __getitem__(self, i: int) -> ExampleOutcome:
        step = int(self.first_success_step[i])
        return ExampleOutcome(
            delta=self.delta[i],
            success=bool(self.success[i]),
            first_success_step=step if step >= 0 else None,
            loss_trace=self.loss_trace[i],
            grad_evals=int(self.grad_evals[i]),
            final_loss=float(self.final_loss[i]),
            target=None if self.target is None else int(self.target[i]),
        )


@dataclass
class GradCounter:
    """Counts per-example input-gradient evaluations consumed by attack updates."""

    count: int = 0

    def add(self, n: int) -> None:
        self.count += int(n)

    def reset(self) -> int:
        n, self.count = self.count, 0
        return n


GRAD_COUNTER = GradCounter()


def cross_entropy(z: np.ndarray, labels: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    return lse - shifted[np.arange(len(z)), labels]


# ---------------------------------------------------------------------------
# primitives


def project(delta, x, budget: PerturbationBudget) -> np.ndarray:
    """Closest point of the permissible set, coordinate by coordinate.

    Clamping to ``[-eps, eps]`` and then to the pixel range is the same as
    clamping once to the intersection of both intervals, which is what this
    does; the result is exactly feasible in floating point.
    """
    delta, x = np.asarray(delta), np.asarray(x)
    if delta.shape != x.shape:
        raise ShapeError(f"delta shape {delta.shape} != input shape {x.shape}")
    lo, hi = budget.bounds(x)
    return np.clip(delta, lo, hi).astype(np.result_type(delta.dtype, x.dtype), copy=False)


def _as_rng_list(rng, n: int) -> list[np.random.Generator]:
    if isinstance(rng, np.random.Generator):
        return [rng] * n
    rng = list(rng)
    if len(rng) != n:
        raise ValueError(f"need {n} generators, got {len(rng)}")
    return rng


def sample_init(x, budget: PerturbationBudget, rng) -> np.ndarray:
    """Uniform draw from the permissible set around ``x``.

    ``rng`` is a single generator (shared across the leading axis) or one
    generator per example of a batch.
    """
    x = np.asarray(x)
    lo, hi = budget.bounds(x)
    if isinstance(rng, np.random.Generator):
        u = rng.random(x.shape)
    else:
        gens = _as_rng_list(rng, len(x))
        u = np.stack([g.random(x.shape[1:]) for g in gens]) if len(x) else np.zeros(x.shape)
    return np.clip(lo + (hi - lo) * u, lo, hi).astype(lo.dtype, copy=False)


def sample_step_field(a: float, shape, rng: np.random.Generator, jitter: float = 1.0, dtype=np.float64) -> np.ndarray:
    """I.i.d. step sizes, uniform on ``[a(1-jitter), a(1+jitter)]``.

    The default ``jitter=1`` gives ``U(0, 2a)``; ``jitter=0`` collapses every
    coordinate to exactly ``a``.
    """
    if a < 0:
        raise ValueError("expected step size must be >= 0")
    u = rng.random(shape)
    return (a + a * jitter * (2.0 * u - 1.0)).astype(dtype, copy=False)


# ---------------------------------------------------------------------------
# shared update loop


def _prepare(model: Model, x, y, target=None):
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(model.dtype)
    single = x.shape == model.input_shape
    if single:
        x = x[None]
    if x.shape[1:] != model.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match model input {model.input_shape}")
    y = np.atleast_1d(np.asarray(y))
    if y.shape != (len(x),):
        raise ShapeError(f"{y.size} labels for {len(x)} inputs")
    k = model.num_classes
    if y.dtype.kind not in "iu" or np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"labels must be class indices in [0, {k})")
    if target is not None:
        target = np.atleast_1d(np.asarray(target))
        if target.shape != y.shape:
            raise ShapeError("one target label per example required")
        if target.dtype.kind not in "iu" or np.any(target < 0) or np.any(target >= k):
            raise ValueError(f"targets must be class indices in [0, {k})")
        if np.any(target == y):
            raise ValueError("target label must differ from the true label")
    return x, y.astype(np.int64), target


def _indices(indices, n: int) -> np.ndarray:
    idx = np.arange(n) if indices is None else np.asarray(indices, dtype=np.int64)
    if idx.shape != (n,):
        raise ValueError("one index per example required")
    return idx


StepFn = Callable[[np.ndarray, list[np.random.Generator]], "np.ndarray | float"]


def _signed_ascent(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    budget: PerturbationBudget,
    steps: int,
    step_fn: StepFn,
    rngs: list[np.random.Generator],
    *,
    random_init: bool,
    early_stop: bool,
    target: np.ndarray | None = None,
    on_step: Callable[[int, np.ndarray, np.ndarray], None] | None = None,
) -> AttackResult:
    n = len(x)
    lo, hi = budget.bounds(x)
    if random_init:
        delta = sample_init(x, budget, rngs)
    else:
        delta = np.zeros_like(x)
    objective = y if target is None else target
    direction = 1 if target is None else -1

    success = np.zeros(n, dtype=bool)
    first = np.full(n, -1, dtype=np.int64)
    evals = np.zeros(n, dtype=np.int64)
    final_loss = np.zeros(n, dtype=np.float64)
    traces: list[list[float]] = [[] for _ in range(n)]
    active = np.arange(n)

    def record(k: int, idx: np.ndarray, z: np.ndarray, obj_loss: np.ndarray) -> np.ndarray:
        # scores iterate k (after k updates) for examples idx; returns misclassified mask
        fooled = predict_logits(z) != y[idx]
        final_loss[idx] = cross_entropy(z.astype(np.float64), y[idx])
        for j, i in enumerate(idx):
            traces[i].append(float(obj_loss[j]))
        newly = fooled & ~success[idx]
        first[idx[newly]] = k
        success[idx[fooled]] = True
        return fooled

    for k in range(1, steps + 1):
        obj_loss, z, g = loss_and_input_grad(model, x[active] + delta[active], objective[active])
        if k > 1:
            fooled = record(k - 1, active, z, obj_loss)
            if early_stop and fooled.any():
                keep = ~fooled
                active, g = active[keep], g[keep]
        if len(active) == 0:
            break
        tau = step_fn(active, rngs)
        stepped = delta[active] + direction * tau * np.sign(g)
        delta[active] = np.clip(stepped, lo[active], hi[active])
        evals[active] += 1
        GRAD_COUNTER.add(len(active))
        assert budget.contains(x[active], delta[active]), "iterate left the permissible set"
        if on_step is not None:
            on_step(k, active, delta[active])
    else:
        if len(active):
            z = forward(model, x[active] + delta[active]).data
            obj_loss = cross_entropy(z.astype(np.float64), objective[active])
            record(steps, active, z, obj_loss)

    return AttackResult(
        delta=delta,
        success=success,
        first_success_step=first,
        loss_trace=[np.asarray(t) for t in traces],
        grad_evals=evals,
        final_loss=final_loss,
        target=None if target is None else np.asarray(target),
    )


def _fixed_step(tau: float) -> StepFn:
    return lambda active, rngs: tau


def _random_step(a: float, jitter: float, shape: tuple[int, ...], dtype) -> StepFn:
    def step(active, rngs):
        return np.stack([sample_step_field(a, shape, rngs[i], jitter, dtype) for i in active])

    return step


# ---------------------------------------------------------------------------
# attacks


def pgd(
    model: Model,
    x,
    y,
    budget: PerturbationBudget,
    step_size: float,
    steps: int,
    *,
    random_init: bool = True,
    early_stop: bool = False,
    target=None,
    seed: int = 0,
    indices: Sequence[int] | None = None,
    restart: int = 0,
    stream: tuple[int, ...] = (),
    on_step=None,
) -> AttackResult:
    """Projected signed-gradient ascent with a scalar step.

    With ``target`` set the loss on the target label is descended instead,
    while success still means "no longer predicted as ``y``".
    """
    if not step_size > 0:
        raise ValueError("step_size must be > 0")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x, y, target = _prepare(model, x, y, target)
    idx = _indices(indices, len(x))
    if target is None:
        rngs = substreams(seed, idx, *stream, restart)
    else:
        rngs = [substreams(seed, [i], *stream, restart, t)[0] for i, t in zip(idx, target)]
    return _signed_ascent(
        model, x, y, budget, steps, _fixed_step(step_size), rngs,
        random_init=random_init, early_stop=early_stop, target=target, on_step=on_step,
    )


def witchcraft(
    model: Model,
    x,
    y,
    budget: PerturbationBudget,
    expected_step: float,
    steps: int,
    *,
    jitter: float = 1.0,
    random_init: bool = True,
    early_stop: bool = True,
    seed: int = 0,
    indices: Sequence[int] | None = None,
    restart: int = 0,
    stream: tuple[int, ...] = (),
    on_step=None,
) -> AttackResult:
    """PGD with a fresh coordinate-wise random step field at every update.

    Each update draws ``tau ~ U(0, 2a)`` independently per coordinate and
    moves ``delta <- Proj[delta + tau * sign(grad)]``. The run starts from a
    uniform point of the permissible set and, by default, stops at the first
    misclassified iterate. ``jitter`` narrows the step distribution to
    ``U(a(1-jitter), a(1+jitter))``; at 0 the attack coincides with PGD at
    ``step_size=a``.
    """
    if not expected_step > 0:
        raise ValueError("expected_step must be > 0")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x, y, _ = _prepare(model, x, y)
    idx = _indices(indices, len(x))
    rngs = substreams(seed, idx, *stream, restart)
    step_fn = _random_step(expected_step, jitter, model.input_shape, x.dtype)
    return _signed_ascent(
        model, x, y, budget, steps, step_fn, rngs,
        random_init=random_init, early_stop=early_stop, on_step=on_step,
    )


def fgsm(model: Model, x, y, budget: PerturbationBudget) -> AttackResult:
    """One epsilon-sized signed-gradient step from the clean input."""
    x, y, _ = _prepare(model, x, y)
    if budget.epsilon == 0:
        # pgd refuses a zero step; the projection would zero it anyway
        return _signed_ascent(model, x, y, budget, 1, _fixed_step(0.0), [None] * len(x),
                              random_init=False, early_stop=False)
    return pgd(model, x, y, budget, budget.epsilon, 1, random_init=False)


def _merge(best: AttackResult, new: AttackResult, rows: np.ndarray, take: np.ndarray) -> None:
    """Overwrite ``best`` at ``rows[take]`` with the corresponding rows of ``new``."""
    src = np.flatnonzero(take)
    dst = rows[src]
    best.delta[dst] = new.delta[src]
    best.success[dst] = new.success[src]
    best.first_success_step[dst] = new.first_success_step[src]
    best.final_loss[dst] = new.final_loss[src]
    for s, d in zip(src, dst):
        best.loss_trace[d] = new.loss_trace[s]
    if best.target is not None and new.target is not None:
        best.target[dst] = new.target[src]


def pgd_restarts(
    model: Model,
    x,
    y,
    budget: PerturbationBudget,
    step_size: float,
    steps: int,
    restarts: int,
    *,
    early_stop: bool = False,
    seed: int = 0,
    indices: Sequence[int] | None = None,
    stream: tuple[int, ...] = (),
) -> AttackResult:
    """Randomly initialised PGD repeated up to ``restarts`` times.

    An example stops restarting once a run succeeds; the first successful run
    is returned, otherwise the run with the largest final loss. Gradient
    evaluations are summed over runs.
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    x, y, _ = _prepare(model, x, y)
    idx = _indices(indices, len(x))
    best = pgd(model, x, y, budget, step_size, steps, early_stop=early_stop,
               seed=seed, indices=idx, restart=0, stream=stream)
    for r in range(1, restarts):
        rows = np.flatnonzero(~best.success)
        if len(rows) == 0:
            break
        res = pgd(model, x[rows], y[rows], budget, step_size, steps, early_stop=early_stop,
                  seed=seed, indices=idx[rows], restart=r, stream=stream)
        best.grad_evals[rows] += res.grad_evals
        take = res.success | (res.final_loss > best.final_loss[rows])
        _merge(best, res, rows, take)
    return best


def targeted_step(
    model: Model,
    x,
    delta,
    target,
    budget: PerturbationBudget,
    step_field,
    true_label=None,
) -> np.ndarray:
    """One update descending the loss on ``target``: ``Proj[delta - step * sign(grad)]``."""
    x = np.asarray(x)
    single = x.shape == model.input_shape
    xb = x[None] if single else x
    db = np.asarray(delta, dtype=xb.dtype).reshape(xb.shape)
    tb = np.atleast_1d(np.asarray(target))
    if true_label is not None and np.any(tb == np.atleast_1d(np.asarray(true_label))):
        raise ValueError("target label must differ from the true label")
    if tb.dtype.kind not in "iu" or np.any(tb < 0) or np.any(tb >= model.num_classes):
        raise ValueError("targets must be class indices")
    step = np.broadcast_to(np.asarray(step_field), db.shape[1:] if single else db.shape)
    step = step.reshape(db.shape) if single else step
    g = loss_and_input_grad(model, xb + db, tb)[2]
    GRAD_COUNTER.add(len(xb))
    out = project(db - step * np.sign(g), xb, budget)
    return out[0] if single else out


def multi_targeted(
    model: Model,
    x,
    y,
    budget: PerturbationBudget,
    step_size: float,
    steps: int,
    *,
    random_init: bool = True,
    early_stop: bool = False,
    seed: int = 0,
    indices: Sequence[int] | None = None,
    stream: tuple[int, ...] = (),
) -> AttackResult:
    """Targeted PGD toward every incorrect class.

    Among the targets that succeed, the one whose perturbation has the
    largest true-label loss is returned (ties keep the earlier target). With
    no success, the run with the largest true-label loss is returned.
    """
    x, y, _ = _prepare(model, x, y)
    k = model.num_classes
    if k < 2:
        raise ValueError("multi-targeted attack needs at least two classes")
    idx = _indices(indices, len(x))
    best = None
    for offset in range(1, k):
        target = (y + offset) % k
        res = pgd(model, x, y, budget, step_size, steps, random_init=random_init,
                  early_stop=early_stop, target=target, seed=seed, indices=idx, stream=stream)
        if best is None:
            best = res
            continue
        best.grad_evals += res.grad_evals
        better = res.final_loss > best.final_loss
        take = (res.success & ~best.success) | ((res.success == best.success) & better)
        _merge(best, res, np.arange(len(x)), take)
    return best


def run_attack(
    model: Model,
    x,
    y,
    budget: PerturbationBudget,
    config: AttackConfig,
    *,
    indices: Sequence[int] | None = None,
    stream: tuple[int, ...] = (),
) -> AttackResult:
    """Dispatch on ``config.family``."""
    c = config
    common = dict(seed=c.seed, indices=indices, stream=stream)
    if c.family == "fgsm":
        return fgsm(model, x, y, budget)
    if c.family == "pgd":
        return pgd(model, x, y, budget, c.step, c.steps, random_init=c.random_init,
                   early_stop=c.early_stop, **common)
    if c.family == "pgd-restarts":
        return pgd_restarts(model, x, y, budget, c.step, c.steps, c.restarts,
                            early_stop=c.early_stop, **common)
    if c.family == "witchcraft":
        return witchcraft(model, x, y, budget, c.step, c.steps, jitter=c.jitter,
                          random_init=c.random_init, early_stop=c.early_stop, **common)
    return multi_targeted(model, x, y, budget, c.step, c.steps, random_init=c.random_init,
                          early_stop=c.early_stop, **common)
