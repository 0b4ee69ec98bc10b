"""Experiment harness: configs, seeded runs, lambda sweeps and CSV / JSON / SVG reports."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import yaml

from .data import AugmentPolicy, SyntheticTaskSpec, gen_shapes_task
from .errors import ConfigError
from .vat import ArchConfig, EpochRow, VatConfig, evaluate, fit

log = logging.getLogger(__name__)

METHODS = ("baseline", "vat-early", "vat-late")
DEFAULT_LAMBDAS = (0.0, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0)
CSV_COLUMNS = ("run_id", "method", "lambda", "seed", "epoch", "train_loss", "aux_bce", "total_loss", "val_metric", "feature_gap")


@dataclass(frozen=True)
class TrainSettings:
    batch_size: int = 8
    max_epochs: int = 500
    patience: int = 50
    lr: float = 1e-3
    track_feature_gap: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    methods: tuple[str, ...] = ("baseline", "vat-early")
    lambdas: tuple[float, ...] = DEFAULT_LAMBDAS
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    train: TrainSettings = field(default_factory=TrainSettings)
    arch: ArchConfig = field(default_factory=ArchConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy.none)
    # None: each run generates its data from its own seed
    data_seed: Optional[int] = None
    out: str = "runs"
    parallel: int = 1

    def validate(self) -> None:
        if not self.methods:
            raise ConfigError("methods must be non-empty", "methods")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {METHODS}", "methods")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("methods must be distinct", "methods")
        if not self.lambdas:
            raise ConfigError("lambdas must be non-empty", "lambdas")
        if any(not (l >= 0 and math.isfinite(l)) for l in self.lambdas):
            raise ConfigError("lambdas must be finite and >= 0", "lambdas")
        if len(set(self.lambdas)) != len(self.lambdas):
            raise ConfigError("lambdas must be distinct", "lambdas")
        if any(m != "baseline" for m in self.methods) and 0.0 not in self.lambdas:
            raise ConfigError("VAT methods need lambda 0 in the grid as the baseline anchor", "lambdas")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be non-empty and distinct", "seeds")
        if self.parallel < 1:
            raise ConfigError("parallel must be >= 1", "parallel")
        self.task.validate()
        self.arch.validate()
        if self.arch.image_size != self.task.image_size:
            raise ConfigError(f"arch.image_size {self.arch.image_size} != task.image_size {self.task.image_size}", "arch")
        self.vat_config("vat-early", 0.0, self.seeds[0]).validate()

    def vat_config(self, method: str, lam: float, seed: int) -> VatConfig:
        return VatConfig(
            lam=0.0 if method == "baseline" else lam,
            aggregation="late" if method == "vat-late" else "early",
            batch_size=self.train.batch_size,
            max_epochs=self.train.max_epochs,
            patience=self.train.patience,
            lr=self.train.lr,
            seed=seed,
            task=self.task.kind,
            arch=self.arch,
            augment=self.augment,
            track_feature_gap=self.train.track_feature_gap,
        )

    def runs(self) -> list[tuple[str, float, int]]:
        """Every (method, lambda, seed) in execution order; the baseline ignores the lambda grid."""
        out = []
        for method in self.methods:
            lams = (0.0,) if method == "baseline" else self.lambdas
            for lam in lams:
                for seed in self.seeds:
                    out.append((method, float(lam), int(seed)))
        return out


@dataclass
class RunReport:
    run_id: str
    method: str
    lam: float
    seed: int
    rows: list[EpochRow]
    test_metric: float
    best_val_metric: float = float("nan")
    best_epoch: int = 0
    wall_seconds: float = 0.0
    test_probs: Optional[np.ndarray] = field(default=None, repr=False)
    test_targets: Optional[np.ndarray] = field(default=None, repr=False)


def run_id(method: str, lam: float, seed: int) -> str:
    return f"{method}_lam{lam:g}_seed{seed}"


def run_single(config: ExperimentConfig, method: str, lam: float, seed: int) -> RunReport:
    """Generate data, fit, and evaluate once on X_test with the best-validation parameters."""
    data_seed = seed if config.data_seed is None else config.data_seed
    splits = gen_shapes_task(dataclasses.replace(config.task, seed=data_seed))
    start = time.perf_counter()
    state, rows = fit(splits, config.vat_config(method, lam, seed))
    test = evaluate(state.model, splits.test)
    return RunReport(
        run_id=run_id(method, lam, seed),
        method=method,
        lam=lam,
        seed=seed,
        rows=rows,
        test_metric=test,
        best_val_metric=state.best_metric,
        best_epoch=state.best_epoch,
        wall_seconds=time.perf_counter() - start,
        test_probs=state.model.predict_proba(splits.test.images),
        test_targets=splits.test.targets,
    )


def _run_job(args) -> RunReport:
    return run_single(*args)


class ReportWriter:
    """Appends each finished run to ``runs.csv`` and refreshes ``summary.json``.

    Runs are written in submission order, so an interrupted experiment leaves a
    valid prefix of the complete CSV.
    """

    def __init__(self, directory, save_predictions: bool = True):
        self.dir = Path(directory)
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
            with open(self.dir / "runs.csv", "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(CSV_COLUMNS)
        except OSError as exc:
            raise OSError(f"cannot write reports to {self.dir}: {exc}") from exc
        self.save_predictions = save_predictions
        self.reports: list[RunReport] = []
        self.write_summary()

    def add(self, report: RunReport) -> None:
        with open(self.dir / "runs.csv", "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in csv_rows(report):
                w.writerow(row)
        if self.save_predictions and report.test_probs is not None:
            (self.dir / "preds").mkdir(exist_ok=True)
            np.savez(self.dir / "preds" / f"{report.run_id}.npz", probs=report.test_probs, targets=report.test_targets,
                     method=report.method, lam=report.lam, seed=report.seed)
        self.reports.append(report)
        self.write_summary()

    def write_summary(self) -> None:
        tmp = self.dir / "summary.json.tmp"
        tmp.write_text(json.dumps(summarize(self.reports), indent=2) + "\n")
        os.replace(tmp, self.dir / "summary.json")


def _fmt(x: float) -> str:
    return repr(float(x))


def csv_rows(report: RunReport) -> Iterable[list[str]]:
    for r in report.rows:
        yield [report.run_id, report.method, _fmt(report.lam), str(report.seed), str(r.epoch),
               _fmt(r.train_loss), _fmt(r.aux_bce), _fmt(r.total_loss), _fmt(r.val_metric), _fmt(r.feature_gap)]


def read_runs_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected runs.csv header {header}")
        out = []
        for row in reader:
            rec = dict(zip(header, row))
            for k in ("lambda", "train_loss", "aux_bce", "total_loss", "val_metric", "feature_gap"):
                rec[k] = float(rec[k])
            rec["seed"] = int(rec["seed"])
            rec["epoch"] = int(rec["epoch"])
            out.append(rec)
        return out


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


def summarize(reports: Sequence[RunReport]) -> dict:
    """Per-(method, lambda) mean and sample std of the final test metric."""
    groups: dict[tuple[str, float], list[RunReport]] = {}
    for r in reports:
        groups.setdefault((r.method, r.lam), []).append(r)
    configs = []
    for (method, lam), rs in groups.items():
        mean, std = _mean_std([r.test_metric for r in rs])
        configs.append({
            "method": method,
            "lambda": lam,
            "n_runs": len(rs),
            "mean_test_metric": mean,
            "std_test_metric": std,
            "seeds": [r.seed for r in rs],
            "test_metrics": [r.test_metric for r in rs],
        })
    runs = [{"run_id": r.run_id, "test_metric": r.test_metric, "best_val_metric": r.best_val_metric,
             "best_epoch": r.best_epoch, "epochs": len(r.rows), "wall_seconds": r.wall_seconds} for r in reports]
    return {"configs": configs, "runs": runs}


def run_experiment(
    config: ExperimentConfig,
    out: Optional[str] = None,
    writer: Optional[ReportWriter] = None,
    runs: Optional[Sequence[tuple[str, float, int]]] = None,
) -> list[RunReport]:
    """Execute every configured run (or the explicit ``runs`` subset); reports are written as each run finishes."""
    config.validate()
    jobs = [(config, m, float(l), int(s)) for m, l, s in (config.runs() if runs is None else runs)]
    if writer is None:
        writer = ReportWriter(out or config.out)
    reports = []
    if config.parallel > 1:
        with ProcessPoolExecutor(max_workers=config.parallel) as pool:
            for rep in pool.map(_run_job, jobs):
                writer.add(rep)
                reports.append(rep)
    else:
        for job in jobs:
            rep = _run_job(job)
            log.info("%s: test metric %.4f after %d epochs", rep.run_id, rep.test_metric, len(rep.rows))
            writer.add(rep)
            reports.append(rep)
    return reports


def write_reports(reports: Sequence[RunReport], directory, sweep: bool = False) -> list[Path]:
    """Write ``runs.csv`` and ``summary.json`` (plus sweep files when ``sweep``) for finished reports."""
    writer = ReportWriter(directory, save_predictions=False)
    for r in reports:
        writer.add(r)
    paths = [writer.dir / "runs.csv", writer.dir / "summary.json"]
    if sweep:
        paths += write_sweep_files(sweep_table(reports), writer.dir)
    return paths


# ---------------------------------------------------------------- sweeps


@dataclass
class SweepPoint:
    method: str
    lam: float
    mean_metric: float
    std_metric: float
    n_runs: int


@dataclass
class SweepReport:
    points: list[SweepPoint]
    baseline_mean: Optional[float]
    # method -> seed -> (lambda chosen on X_val, test metric at that lambda)
    selected: dict[str, dict[int, tuple[float, float]]]
    reports: list[RunReport] = field(repr=False, default_factory=list)

    def argmax_lambda(self, method: str) -> float:
        pts = [p for p in self.points if p.method == method]
        best = max(pts, key=lambda p: (p.mean_metric, -p.lam))
        return best.lam

    def selected_mean(self, method: str) -> float:
        return float(np.mean([t for _, t in self.selected[method].values()]))


def sweep_table(reports: Sequence[RunReport]) -> list[SweepPoint]:
    groups: dict[tuple[str, float], list[float]] = {}
    for r in reports:
        if r.method != "baseline":
            groups.setdefault((r.method, r.lam), []).append(r.test_metric)
    pts = []
    for (method, lam), vals in sorted(groups.items()):
        mean, std = _mean_std(vals)
        pts.append(SweepPoint(method, lam, mean, std, len(vals)))
    return pts


def select_lambda(reports: Sequence[RunReport], method: str) -> dict[int, tuple[float, float]]:
    """Per seed, the lambda with the best X_val metric (ties go to the smaller lambda) and its test metric."""
    by_seed: dict[int, list[RunReport]] = {}
    for r in reports:
        if r.method == method:
            by_seed.setdefault(r.seed, []).append(r)
    out = {}
    for seed, rs in sorted(by_seed.items()):
        best = max(rs, key=lambda r: (r.best_val_metric, -r.lam))
        out[seed] = (best.lam, best.test_metric)
    return out


def write_sweep_files(points: Sequence[SweepPoint], directory) -> list[Path]:
    directory = Path(directory)
    csv_path = directory / "sweep.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("method", "lambda", "mean_metric", "std_metric"))
        for p in points:
            w.writerow((p.method, _fmt(p.lam), _fmt(p.mean_metric), _fmt(p.std_metric)))
    svg_path = directory / "sweep.svg"
    plot_sweep(points, svg_path)
    return [csv_path, svg_path]


def plot_sweep(points: Sequence[SweepPoint], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method in sorted({p.method for p in points}):
        pts = sorted((p for p in points if p.method == method), key=lambda p: p.lam)
        lam = [p.lam for p in pts]
        ax.errorbar(lam, [p.mean_metric for p in pts], yerr=[p.std_metric for p in pts], marker="o", capsize=3, label=method)
    positive = [p.lam for p in points if p.lam > 0]
    if positive:
        ax.set_xscale("symlog", linthresh=min(positive))
    ax.set_xlabel("mixing coefficient lambda")
    ax.set_ylabel("test metric (mean over seeds)")
    ax.legend()
    fig.tight_layout()
    # fixed salt and no date keep the SVG byte-identical across runs
    with matplotlib.rc_context({"svg.hashsalt": "vatlab"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def lambda_sweep(config: ExperimentConfig, out: Optional[str] = None) -> SweepReport:
    """Run every (method, lambda, seed) and summarize the test metric per lambda."""
    if len(config.lambdas) < 2 or 0.0 not in config.lambdas:
        raise ConfigError("a sweep needs at least 2 lambda values including 0")
    directory = Path(out or config.out)
    writer = ReportWriter(directory)
    reports = run_experiment(config, writer=writer)
    points = sweep_table(reports)
    write_sweep_files(points, directory)
    base = [r.test_metric for r in reports if r.method == "baseline"]
    selected = {m: select_lambda(reports, m) for m in config.methods if m != "baseline"}
    return SweepReport(points, float(np.mean(base)) if base else None, selected, list(reports))


# ---------------------------------------------------------------- config files


_SECTIONS = {"task": SyntheticTaskSpec, "train": TrainSettings, "arch": ArchConfig, "augment": AugmentPolicy}
_TOP_LEVEL = {"methods": "str-list", "lambdas": "float-list", "seeds": "int-list", "data_seed": "int-or-null",
              "out": "str", "parallel": "int"}


def _scalar(node: yaml.Node):
    return yaml.safe_load(yaml.serialize(node))


def _line(node: yaml.Node) -> int:
    return node.start_mark.line + 1


def _coerce(value, kind, where: str):
    def bad():
        return ConfigError(f"{where}: expected {kind}, got {value!r}")

    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad()
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad()
        return float(value)
    if kind == "bool":
        if not isinstance(value, bool):
            raise bad()
        return value
    if kind == "str":
        if not isinstance(value, str):
            raise bad()
        return value
    if kind == "int-or-null":
        return None if value is None else _coerce(value, "int", where)
    if kind.endswith("-list") or kind.endswith("-tuple"):
        inner = kind.rsplit("-", 1)[0]
        if not isinstance(value, list):
            raise bad()
        return tuple(_coerce(v, inner, where) for v in value)
    raise AssertionError(kind)


def _kind_of(default) -> str:
    if isinstance(default, bool):
        return "bool"
    if isinstance(default, int):
        return "int"
    if isinstance(default, float):
        return "float"
    if isinstance(default, str):
        return "str"
    if isinstance(default, tuple):
        return ("float" if any(isinstance(v, float) for v in default) else "int") + "-tuple"
    raise AssertionError(type(default))


def _section(cls, node: yaml.Node, path: str, name: str):
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{path}:{_line(node)}: section '{name}' must be a mapping")
    defaults = cls()
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key_node, value_node in node.value:
        key = key_node.value
        where = f"{path}:{_line(value_node)}: {name}.{key}"
        if key not in known:
            raise ConfigError(f"{path}:{_line(key_node)}: unknown key '{name}.{key}' (known: {', '.join(sorted(known))})")
        kwargs[key] = _coerce(_scalar(value_node), _kind_of(getattr(defaults, key)), where)
    try:
        obj = cls(**kwargs)
        if hasattr(obj, "validate"):
            obj.validate()
    except (ConfigError, ValueError) as exc:
        line = next((_line(k) for k, _ in node.value if k.value in str(exc).split()), _line(node))
        raise ConfigError(f"{path}:{line}: section '{name}': {exc}", name) from exc
    return obj


def parse_config(text: str, path: str = "<config>") -> ExperimentConfig:
    """Parse and validate a YAML experiment config; every error names the offending line."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 0
        raise ConfigError(f"{path}:{line}: malformed YAML: {getattr(exc, 'problem', exc)}") from exc
    if root is None:
        root = yaml.MappingNode("tag:yaml.org,2002:map", [])
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError(f"{path}:{_line(root)}: top level must be a mapping")
    kwargs = {}
    lines = {}
    for key_node, value_node in root.value:
        key = key_node.value
        lines[key] = _line(value_node)
        if key in _SECTIONS:
            kwargs[key] = _section(_SECTIONS[key], value_node, path, key)
        elif key in _TOP_LEVEL:
            kwargs[key] = _coerce(_scalar(value_node), _TOP_LEVEL[key], f"{path}:{_line(value_node)}: {key}")
        else:
            known = sorted(list(_SECTIONS) + list(_TOP_LEVEL))
            raise ConfigError(f"{path}:{_line(key_node)}: unknown key '{key}' (known: {', '.join(known)})")
    if "arch" not in kwargs and "task" in kwargs:
        kwargs["arch"] = dataclasses.replace(ArchConfig(), image_size=kwargs["task"].image_size)
    config = ExperimentConfig(**kwargs)
    try:
        config.validate()
    except ConfigError as exc:
        line = lines.get(exc.field, 1)
        raise ConfigError(f"{path}:{line}: {exc}", exc.field) from exc
    return config


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    return parse_config(text, str(path))
