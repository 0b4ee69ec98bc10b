"""Command-line entry point: ``vatlab {train,sweep,gradcheck,decompose,gen-data}``.

Exit codes: 0 success, 1 validation failure (bad config, failed check), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import IdxFormatError, gen_shapes_task, save_split
from .errors import ConfigError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"--seeds expects comma-separated integers, got {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("--seeds is empty")
    return seeds


def _positive(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("--parallel must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vatlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="YAML experiment config")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seeds", type=_seeds, help="comma-separated seeds (overrides the config)")
        p.add_argument("--parallel", type=_positive, help="worker processes (overrides the config)")

    common(sub.add_parser("train", help="run every configured method once per seed at the first lambda"))
    common(sub.add_parser("sweep", help="run the lambda grid and write sweep.csv / sweep.svg"))
    g = sub.add_parser("gradcheck", help="finite-difference suite over all differentiable ops")
    g.add_argument("--instances", type=int, default=100)
    g.add_argument("--only", help="substring filter on case names")
    g.add_argument("--seeds", type=_seeds, default=(0,), help="first seed is used")
    g.add_argument("--out", help="write results JSON here")
    d = sub.add_parser("decompose", help="bias-variance decomposition over saved test predictions")
    d.add_argument("--runs", required=True, help="directory holding preds/*.npz from train or sweep")
    d.add_argument("--out", help="write the decomposition JSON here")
    d.add_argument("--center", default="geometric", choices=("geometric", "average"))
    common(sub.add_parser("gen-data", help="materialize the configured synthetic task as IDX files"))
    return parser


def _load(args):
    from .experiments import load_config

    config = load_config(args.config)
    updates = {}
    if args.out:
        updates["out"] = args.out
    if args.seeds:
        updates["seeds"] = args.seeds
    if args.parallel:
        updates["parallel"] = args.parallel
    config = dataclasses.replace(config, **updates)
    config.validate()
    return config


def cmd_train(args) -> int:
    from .experiments import run_experiment

    config = _load(args)
    # VAT methods train at the first non-zero grid value; the baseline ignores lambda
    lam = next((l for l in config.lambdas if l > 0), 0.0)
    runs = [(m, 0.0 if m == "baseline" else lam, s) for m in config.methods for s in config.seeds]
    reports = run_experiment(config, runs=runs)
    for r in reports:
        print(f"{r.run_id}\ttest={r.test_metric:.4f}\tepochs={len(r.rows)}\t{r.wall_seconds:.1f}s")
    print(f"reports written to {config.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .experiments import lambda_sweep

    config = _load(args)
    report = lambda_sweep(config)
    if report.baseline_mean is not None:
        print(f"baseline mean test metric: {report.baseline_mean:.4f}")
    for p in report.points:
        print(f"{p.method}\tlambda={p.lam:g}\tmean={p.mean_metric:.4f}\tstd={p.std_metric:.4f}")
    for method, chosen in report.selected.items():
        print(f"{method}: mean test metric at X_val-selected lambda = {report.selected_mean(method):.4f}")
    print(f"sweep written to {config.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    results = run_suite(args.instances, args.seeds[0], args.only)
    if not results:
        print(f"no case matches {args.only!r}", file=sys.stderr)
        return EXIT_INVALID
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:<34} max_rel_err={r.max_error:.2e}  ({r.seconds:.1f}s)")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps([dataclasses.asdict(r) for r in results], indent=2) + "\n")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} cases within {TOLERANCE:g}")
    return EXIT_INVALID if failed else EXIT_OK


def load_predictions(directory) -> dict[tuple[str, float], list[tuple[int, np.ndarray, np.ndarray]]]:
    """Group saved per-run test predictions by (method, lambda)."""
    files = sorted(Path(directory, "preds").glob("*.npz"))
    if not files:
        raise FileNotFoundError(f"no saved predictions under {Path(directory, 'preds')}")
    groups: dict = {}
    for f in files:
        with np.load(f) as z:
            key = (str(z["method"]), float(z["lam"]))
            groups.setdefault(key, []).append((int(z["seed"]), z["probs"], z["targets"]))
    return groups


def decompose_runs(directory, center: str = "geometric") -> list[dict]:
    """Per (method, lambda): mean over test items of the decomposition of the ensemble of seeds.

    Q is the one-hot label distribution of each test item (ordinal grades or binary classes).
    """
    from .diagnostics import heskes_decompose

    out = []
    for (method, lam), runs in sorted(load_predictions(directory).items()):
        if len(runs) < 2:
            continue
        probs = np.stack([p for _, p, _ in runs])  # [run, item, class]
        targets = runs[0][2].astype(int)
        n_classes = probs.shape[2]
        terms = []
        for i, t in enumerate(targets):
            q = np.eye(n_classes)[t]
            terms.append(heskes_decompose(q, probs[:, i, :], center).as_dict())
        keys = ("expected_kl", "bias", "variance", "bayes", "residual", "residual_with_bayes")
        row = {"method": method, "lambda": lam, "n_runs": len(runs), "n_items": len(targets), "center": center}
        row.update({k: float(np.mean([t[k] for t in terms])) for k in keys})
        out.append(row)
    return out


def cmd_decompose(args) -> int:
    rows = decompose_runs(args.runs, args.center)
    if not rows:
        print("decomposition needs at least 2 runs per (method, lambda)", file=sys.stderr)
        return EXIT_INVALID
    for r in rows:
        print(f"{r['method']}\tlambda={r['lambda']:g}\tE[KL]={r['expected_kl']:.4f}\tbias={r['bias']:.4f}"
              f"\tvariance={r['variance']:.4f}\tresidual={r['residual']:.2e}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(rows, indent=2) + "\n")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    config = _load(args)
    out = Path(args.out or config.out)
    for seed in config.seeds if args.seeds else (config.data_seed if config.data_seed is not None else config.seeds[0],):
        splits = gen_shapes_task(dataclasses.replace(config.task, seed=seed))
        directory = out / f"seed{seed}" if args.seeds else out
        save_split(splits, directory)
        print(f"wrote {', '.join(splits.subsets())} to {directory}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "gradcheck": cmd_gradcheck, "decompose": cmd_decompose, "gen-data": cmd_gen_data}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, IdxFormatError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
