"""Memoized runs on the shifted synthetic task, shared by the behavioral tests of one pytest session."""

import dataclasses
from functools import lru_cache

from vatlab.data import SyntheticTaskSpec
from vatlab.experiments import ExperimentConfig, RunReport, TrainSettings, run_single

SHIFTED_TASK = SyntheticTaskSpec(shift=3.0, noise_std=0.3, n_tr=32, n_val=256, n_pre=4096, n_test=512)
# 8 items per step gives 4 Adam steps per epoch on 32 training images
TRAIN = TrainSettings(batch_size=8, max_epochs=300, patience=50)
SEEDS = tuple(range(10))


def shifted_config(shift: float = 3.0) -> ExperimentConfig:
    return ExperimentConfig(
        task=dataclasses.replace(SHIFTED_TASK, shift=shift),
        methods=("baseline", "vat-early", "vat-late"),
        lambdas=(0.0, 0.01, 0.1, 0.3, 1.0),
        seeds=SEEDS,
        train=TRAIN,
    )


@lru_cache(maxsize=None)
def shifted_run(method: str, lam: float, seed: int, shift: float = 3.0) -> RunReport:
    """One run; lambda 0 always maps to the baseline run (the two are identical by construction)."""
    if lam == 0.0:
        method = "baseline"
    return run_single(shifted_config(shift), method, float(lam), int(seed))


def gap_at_best(report: RunReport) -> float:
    """feature_gap(X_tr, X_val) of the restored (best-validation) parameters."""
    return report.rows[report.best_epoch - 1].feature_gap


def select_on_val(method: str, lams, seed: int, shift: float = 3.0) -> RunReport:
    """Run with the highest X_val metric over ``lams``; ties go to the smaller lambda."""
    runs = [shifted_run(method, lam, seed, shift) for lam in sorted(lams)]
    return max(runs, key=lambda r: (r.best_val_metric, -r.lam))
