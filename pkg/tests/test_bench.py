import numpy as np
import pytest

from witchcraft.attacks import GRAD_COUNTER, AttackConfig, PerturbationBudget, pgd, witchcraft
from witchcraft.bench import (
    CSV_HEADER,
    RobustAccuracyReport,
    emit_report,
    eval_robust_accuracy,
    plot_path,
    sweep_expected_step,
    sweep_steps,
)
from witchcraft.data import LabeledDataset, synthetic_blobs
from witchcraft.models import TrainConfig, build_model, train_sgd
from witchcraft.tensor import ShapeError

from helpers import linear_model


@pytest.fixture(scope="module")
def trained():
    data = synthetic_blobs(4, 6, 240, seed=3, spread=0.08)
    m = build_model("mlp-small", 0, input_shape=(6,), num_classes=4, hidden=16)
    return train_sgd(m, data, TrainConfig(epochs=5, batch_size=20, lr=0.3)), data


def test_constant_model_is_unattackable():
    m = linear_model(np.zeros((4, 3)), bias=[1.0, 0.0, -1.0])
    data = LabeledDataset(np.full((10, 4), 0.5), np.zeros(10, dtype=int), 3)
    for family in ("fgsm", "pgd", "pgd-restarts", "witchcraft", "multi-targeted"):
        rep = eval_robust_accuracy(m, data, AttackConfig(family, 0.1, 5, restarts=2), 0.3)
        assert rep.robust_acc == rep.clean_acc == 1.0


def test_zero_budget_keeps_clean_accuracy(trained):
    m, data = trained
    for family in ("fgsm", "pgd", "witchcraft"):
        rep = eval_robust_accuracy(m, data, AttackConfig(family, 0.05, 10), 0.0)
        assert rep.robust_acc == rep.clean_acc


def test_accuracy_ordering_and_counting(trained):
    m, data = trained
    GRAD_COUNTER.reset()
    rep = eval_robust_accuracy(m, data, AttackConfig("pgd", 0.02, 10, early_stop=True), 0.15, chunk=37)
    assert 0 <= rep.robust_acc <= rep.clean_acc <= 1
    assert rep.robust_acc < rep.clean_acc
    assert GRAD_COUNTER.count == rep.grad_evals
    n_correct = int(rep.correct.sum())
    fooled = rep.first_success_step[rep.first_success_step > 0]
    # steps x examples, minus the updates skipped after an early stop
    assert rep.grad_evals == 10 * n_correct - (10 - fooled).sum()


def test_report_matches_direct_attack(trained):
    m, data = trained
    rep = eval_robust_accuracy(m, data, AttackConfig("witchcraft", 0.03, 12, seed=4), 0.15)
    idx = np.flatnonzero(rep.correct)
    res = witchcraft(m, data.images[idx], data.labels[idx], PerturbationBudget(0.15), 0.03, 12,
                     early_stop=False, seed=4, indices=idx)
    assert np.array_equal(rep.robust[idx], ~res.success)
    assert not rep.robust[~rep.correct].any()


def test_worker_count_does_not_matter(trained):
    m, data = trained
    cfg = AttackConfig("witchcraft", 0.03, 8, seed=2, early_stop=True)
    one = eval_robust_accuracy(m, data, cfg, 0.15, chunk=25)
    three = eval_robust_accuracy(m, data, cfg, 0.15, chunk=25, workers=3)
    assert np.array_equal(one.first_success_step, three.first_success_step)
    assert one.row() == three.row()


def test_restart_and_step_monotonicity(trained):
    m, data = trained
    accs = [eval_robust_accuracy(m, data, AttackConfig("pgd-restarts", 0.02, 5, r, seed=1), 0.12).robust_acc
            for r in (1, 2, 4)]
    assert accs == sorted(accs, reverse=True)


def test_mismatched_dataset(trained):
    m, _ = trained
    with pytest.raises(ShapeError):
        eval_robust_accuracy(m, synthetic_blobs(4, 5, 10), AttackConfig(), 0.1)
    with pytest.raises(ShapeError):
        eval_robust_accuracy(m, synthetic_blobs(3, 6, 10), AttackConfig(), 0.1)


def test_report_invariant_enforced():
    with pytest.raises(ValueError):
        RobustAccuracyReport(AttackConfig(), 0.1, 1, 0.5, 0.6, 0, np.ones(1, bool), np.full(1, -1))


def test_single_point_sweep_equals_two_evaluations(trained):
    m, data = trained
    sw = sweep_expected_step(m, data, [0.03], 10, 1, 0.15, seed=5)
    for f in ("pgd", "witchcraft"):
        direct = eval_robust_accuracy(m, data, AttackConfig(f, 0.03, 10, early_stop=True, seed=5), 0.15)
        assert sw.reports[f][0][0].row() == direct.row()


def test_vanishing_step_converges(trained):
    m, data = trained
    sw = sweep_expected_step(m, data, [1e-6], 5, 2, 0.15)
    assert np.allclose(sw.mean("pgd"), sw.mean("witchcraft"), atol=2 / len(data))


def test_grid_must_increase(trained):
    m, data = trained
    with pytest.raises(ValueError):
        sweep_expected_step(m, data, [0.03, 0.01], 5, 1, 0.1)
    with pytest.raises(ValueError):
        sweep_steps(m, data, [], 0.01, 1, 0.1)
    with pytest.raises(ValueError):
        sweep_steps(m, data, [5], 0.01, 0, 0.1)


@pytest.mark.parametrize("early_stop", [True, False])
def test_steps_prefix_reuse_matches_separate_runs(trained, early_stop):
    m, data = trained
    sw = sweep_steps(m, data, [1, 4, 9], 0.02, 2, 0.15, seed=3, early_stop=early_stop)
    for f in ("pgd", "witchcraft"):
        for g, n in enumerate((1, 4, 9)):
            for t in range(2):
                cfg = AttackConfig(f, 0.02, n, early_stop=early_stop, seed=3 + t)
                direct = eval_robust_accuracy(m, data, cfg, 0.15)
                derived = sw.reports[f][g][t]
                assert derived.row() == direct.row()
                assert np.array_equal(derived.first_success_step, direct.first_success_step)


def test_steps_sweep_monotone_any_iterate(trained):
    m, data = trained
    sw = sweep_steps(m, data, [1, 3, 10, 20], 0.02, 2, 0.15, families=("pgd", "witchcraft", "pgd-restarts"))
    for f in sw.families:
        r = sw.robust(f)
        assert np.all(np.diff(r, axis=0) <= 0)


def test_paired_test_directions():
    from witchcraft.bench import SweepResult

    def rep(acc, seed):
        return RobustAccuracyReport(AttackConfig(seed=seed), 0.1, 100, 1.0, acc, 0, np.ones(1, bool), np.full(1, -1))

    low = [[rep(a, t) for t, a in enumerate([0.50, 0.52, 0.49, 0.51, 0.50])]]
    high = [[rep(a, t) for t, a in enumerate([0.55, 0.56, 0.55, 0.57, 0.54])]]
    sw = SweepResult("step", (0.01,), 5, ("pgd", "witchcraft"), {"pgd": high, "witchcraft": low})
    assert sw.paired_test()[0] < 0.01
    assert sw.paired_test("pgd", "witchcraft")[0] > 0.99
    same = SweepResult("step", (0.01,), 5, ("pgd", "witchcraft"), {"pgd": high, "witchcraft": high})
    assert sw.mean("witchcraft")[0] == pytest.approx(0.504)
    assert same.paired_test()[0] == 1.0


def test_emit_single_report(tmp_path, trained):
    m, data = trained
    rep = eval_robust_accuracy(m, data, AttackConfig("pgd", 0.02, 5, seed=1), 0.1)
    (out,) = emit_report(rep, tmp_path / "r.csv")
    lines = out.read_text().splitlines()
    assert len(lines) == 2
    assert lines[0] == ",".join(CSV_HEADER)
    assert lines[1].startswith("pgd,5,0.02,1,0.1,1,240,")


def test_emit_is_byte_identical_on_rerun(tmp_path, trained):
    m, data = trained
    paths = []
    for name in ("a", "b"):
        sw = sweep_steps(m, data, [2, 5], 0.02, 2, 0.1, seed=7)
        paths.append(emit_report(sw, tmp_path / f"{name}.csv"))
    for p, q in zip(*paths):
        assert p.read_bytes() == q.read_bytes()


def test_emit_sweep_row_accounting(tmp_path, trained):
    m, data = trained
    small = data.head(30)
    sw = sweep_expected_step(m, small, [0.005, 0.01, 0.02, 0.04, 0.08], 3, 3, 0.1)
    main, plot = emit_report(sw, tmp_path / "s.csv")
    assert len(main.read_text().splitlines()) == 1 + 30
    assert plot == plot_path(tmp_path / "s.csv")
    plot_lines = plot.read_text().splitlines()
    assert plot_lines[0] == "step,pgd,witchcraft,pgd_std,witchcraft_std"
    assert len(plot_lines) == 6
