"""Command-line harness: train, attack, sweep-step-size, sweep-steps, selftest.

Every subcommand also accepts ``--config FILE``, a plain ``key = value``
file whose keys are the long flag names (dashes or underscores); flags
given on the command line override values from the file. Any contract
violation (bad data, shape mismatch, malformed weight file, invalid
configuration) exits with status 1; usage errors exit with status 2.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import selftest
from .attacks import FAMILIES, AttackConfig, PerturbationBudget
from .bench import emit_report, eval_robust_accuracy, sweep_expected_step, sweep_steps
from .data import MNIST_FILES, IdxError, LabeledDataset, load_idx_images, load_idx_labels, normalize
from .models import ARCHS, AdversarialConfig, TrainConfig, WeightFormatError, accuracy, adversarial_train
from .models import build_model, load_weights, save_weights, train_sgd

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    pass


def read_config(path) -> dict[str, str]:
    """Parse a ``key = value`` file; blank lines and ``#`` comments are skipped."""
    values = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{n}: expected key = value")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


# -- parser ---------------------------------------------------------------------


def _data_flags(p: argparse.ArgumentParser, split: str) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--data-dir", type=Path, help=f"directory holding the MNIST {split} IDX files")
    g.add_argument("--images", type=Path, help="IDX image file (overrides --data-dir)")
    g.add_argument("--labels", type=Path, help="IDX label file (overrides --data-dir)")
    g.add_argument("--examples", type=int, help="use only the first N examples")


def _attack_flags(p: argparse.ArgumentParser, sweep: str | None = None) -> None:
    p.add_argument("--weights", type=Path, required=True, help="weight file written by `train`")
    _data_flags(p, "test")
    if sweep is None:
        p.add_argument("--family", choices=FAMILIES, default="pgd")
    else:
        p.add_argument("--families", type=_str_list, default=["pgd", "witchcraft"],
                       help="comma-separated attack families (default pgd,witchcraft)")
    p.add_argument("--eps", type=float, default=0.3, help="l-infinity radius (default 0.3)")
    if sweep != "steps":
        p.add_argument("--steps", type=int, default=40)
    if sweep != "step":
        p.add_argument("--step", type=float, default=0.01,
                       help="fixed step size, or expected step size for witchcraft")
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--jitter", type=float, default=1.0, help="witchcraft step spread in [0, 1]")
    p.add_argument("--early-stop", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--csv-out", type=Path, required=True)
    if sweep is not None:
        p.add_argument("--grid", required=True, type=_float_list if sweep == "step" else _int_list,
                       help="comma-separated grid values")
        p.add_argument("--trials", type=int, default=5, help="trial t uses seed + t")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="witchcraft", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train (optionally adversarially) and save a model")
    t.add_argument("--arch", choices=ARCHS, default="cnn-2conv")
    _data_flags(t, "train")
    t.add_argument("--epochs", type=int, default=5)
    t.add_argument("--batch-size", type=int, default=50)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--adversarial", action=argparse.BooleanOptionalAction, default=False)
    t.add_argument("--eps", type=float, default=0.3)
    t.add_argument("--adv-steps", type=int, default=7)
    t.add_argument("--adv-step-size", type=float, default=0.1)
    t.add_argument("--adv-attack", choices=("pgd", "witchcraft"), default="pgd")
    t.add_argument("--ramp-epochs", type=int, default=0, help="epochs over which eps grows to its final value")
    t.add_argument("--weights-out", type=Path, required=True)

    _attack_flags(sub.add_parser("attack", help="robust accuracy under one attack, as CSV"))
    _attack_flags(sub.add_parser("sweep-step-size", help="robust accuracy over a grid of step sizes"), "step")
    _attack_flags(sub.add_parser("sweep-steps", help="robust accuracy over a grid of step counts"), "steps")
    sub.add_parser("selftest", help="run the built-in oracle and invariant checks")

    for p in sub.choices.values():
        p.add_argument("--config", type=Path, help="key = value file; command-line flags take precedence")
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    if known.config is None or command is None:
        return parser.parse_args(argv)
    sub = parser._subparsers._group_actions[0].choices[command]
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, raw in read_config(known.config).items():
        if key not in actions:
            raise ConfigError(f"{known.config}: unknown key {key!r} for `{command}`")
        action = actions[key]
        if isinstance(action, argparse.BooleanOptionalAction) or action.nargs == 0:
            if raw.lower() not in _TRUE | _FALSE:
                raise ConfigError(f"{known.config}: {key} must be true or false, got {raw!r}")
            defaults[key] = raw.lower() in _TRUE
        else:
            try:
                value = action.type(raw) if action.type else raw
            except ValueError as exc:
                raise ConfigError(f"{known.config}: bad value for {key}: {exc}") from None
            if action.choices is not None and value not in action.choices:
                raise ConfigError(f"{known.config}: {key} must be one of {sorted(action.choices)}")
            defaults[key] = value
        action.required = False  # satisfied by the file; a flag still overrides it
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# -- commands ---------------------------------------------------------------------


def _dataset(args, split: str) -> LabeledDataset:
    images, labels = args.images, args.labels
    if images is None or labels is None:
        if args.data_dir is None:
            raise ConfigError("give --data-dir, or both --images and --labels")
        names = MNIST_FILES[split]
        found = []
        for name in names:
            candidates = [args.data_dir / name, args.data_dir / f"{name}.gz"]
            found.append(next((c for c in candidates if c.exists()), candidates[0]))
        images = images or found[0]
        labels = labels or found[1]
    raw = load_idx_images(images)
    y = load_idx_labels(labels)
    if args.examples is not None:
        if args.examples < 1:
            raise ConfigError("--examples must be >= 1")
        raw, y = raw[: args.examples], y[: args.examples]
    return LabeledDataset(normalize(raw)[..., None], y, 10)


def cmd_train(args) -> int:
    data = _dataset(args, "train")
    model = build_model(args.arch, args.seed, input_shape=data.images.shape[1:])
    adv = None
    if args.adversarial:
        adv = AdversarialConfig(args.eps, args.adv_steps, args.adv_step_size, args.adv_attack,
                                ramp_epochs=args.ramp_epochs)
    cfg = TrainConfig(args.epochs, args.batch_size, args.lr, args.seed, adv)
    model = adversarial_train(model, data, cfg) if adv else train_sgd(model, data, cfg)
    save_weights(model, args.weights_out)
    print(f"train accuracy {accuracy(model, data.images, data.labels):.4f}; weights written to {args.weights_out}")
    return 0


def _attack_config(args, family: str, step: float, steps: int, seed: int) -> AttackConfig:
    return AttackConfig(family, step, steps, args.restarts, args.early_stop, seed=seed, jitter=args.jitter)


def cmd_attack(args) -> int:
    model = load_weights(args.weights)
    data = _dataset(args, "test")
    cfg = _attack_config(args, args.family, args.step, args.steps, args.seed)
    report = eval_robust_accuracy(model, data, cfg, PerturbationBudget(args.eps), workers=args.workers)
    emit_report(report, args.csv_out)
    print(f"{cfg.family}: clean {report.clean_acc:.4f} robust {report.robust_acc:.4f} "
          f"over {report.examples} examples, {report.grad_evals} gradient evaluations")
    return 0


def _check_families(families) -> None:
    unknown = set(families) - set(FAMILIES)
    if unknown or not families:
        raise ConfigError(f"unknown attack families {sorted(unknown)}; choose from {FAMILIES}")


def _print_sweep(sweep, paths) -> None:
    for g, x in enumerate(sweep.grid):
        cells = "  ".join(f"{f} {sweep.mean(f)[g]:.4f}+-{sweep.std(f)[g]:.4f}" for f in sweep.families)
        print(f"{sweep.param}={x}: {cells}")
    print("wrote " + ", ".join(str(p) for p in paths))


def cmd_sweep_step_size(args) -> int:
    _check_families(args.families)
    model = load_weights(args.weights)
    data = _dataset(args, "test")
    sweep = sweep_expected_step(model, data, args.grid, args.steps, args.trials, PerturbationBudget(args.eps),
                                seed=args.seed, families=args.families, early_stop=args.early_stop,
                                restarts=args.restarts, workers=args.workers)
    _print_sweep(sweep, emit_report(sweep, args.csv_out))
    return 0


def cmd_sweep_steps(args) -> int:
    _check_families(args.families)
    model = load_weights(args.weights)
    data = _dataset(args, "test")
    sweep = sweep_steps(model, data, args.grid, args.step, args.trials, PerturbationBudget(args.eps),
                        seed=args.seed, families=args.families, early_stop=args.early_stop,
                        restarts=args.restarts, workers=args.workers)
    _print_sweep(sweep, emit_report(sweep, args.csv_out))
    return 0


def cmd_selftest(args) -> int:
    return 0 if selftest.run_all() else 1


COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "sweep-step-size": cmd_sweep_step_size,
    "sweep-steps": cmd_sweep_steps,
    "selftest": cmd_selftest,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return COMMANDS[args.command](args)
    except (ValueError, OSError, IdxError, WeightFormatError) as exc:
        print(f"witchcraft: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
