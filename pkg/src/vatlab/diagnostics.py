"""KL / total-variation numerics, the bias-variance decomposition of expected KL, and feature-gap diagnostics."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import DimensionError

PROB_FLOOR = 1e-12
STD_FLOOR = 1e-6


class DistributionVector:
    """Finite discrete distribution, renormalized on construction."""

    __slots__ = ("p",)

    def __init__(self, probabilities):
        p = np.asarray(probabilities, dtype=np.float64).ravel()
        if p.size == 0 or not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError("probabilities must be finite, non-negative and non-empty")
        total = p.sum()
        if total <= 0:
            raise ValueError("probabilities sum to zero")
        self.p = p / total

    def __len__(self) -> int:
        return self.p.size

    def __array__(self, dtype=None, copy=None):
        return self.p if dtype is None else self.p.astype(dtype)

    def __repr__(self) -> str:
        return f"DistributionVector({np.array2string(self.p, precision=4)})"


def _dist(x) -> np.ndarray:
    return x.p if isinstance(x, DistributionVector) else DistributionVector(x).p


def _pair(p, q) -> tuple[np.ndarray, np.ndarray]:
    p, q = _dist(p), _dist(q)
    if p.size != q.size:
        raise DimensionError(f"distributions have lengths {p.size} and {q.size}")
    return p, q


def kl_discrete(p, q) -> float:
    """sum_i p_i ln(p_i / q_i) with 0 ln 0 = 0 and q floored at 1e-12."""
    p, q = _pair(p, q)
    nz = p > 0
    kl = float(np.sum(p[nz] * (np.log(p[nz]) - np.log(np.maximum(q[nz], PROB_FLOOR)))))
    # rounding can push near-identical pairs just below zero
    return max(kl, 0.0)


def tv_distance(p, q) -> float:
    p, q = _pair(p, q)
    return float(0.5 * np.abs(p - q).sum())


def pinsker_bound(p, q) -> float:
    """Upper bound on the total-variation distance implied by the KL divergence."""
    return float(np.sqrt(kl_discrete(p, q) / 2.0))


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    std: np.ndarray
    n: int

    @classmethod
    def fit(cls, samples) -> "GaussianStats":
        x = np.asarray(samples, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[0] < 2:
            raise ValueError(f"need at least 2 samples to fit a Gaussian, got {x.shape[0]}")
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0, ddof=1), STD_FLOOR), x.shape[0])


def kl_gaussian_diag(a: GaussianStats, b: GaussianStats) -> float:
    """Closed-form KL(a || b) for diagonal Gaussians, summed over coordinates."""
    if a.mean.shape != b.mean.shape:
        raise DimensionError(f"Gaussian dimensions differ: {a.mean.shape} vs {b.mean.shape}")
    sa = np.maximum(a.std, STD_FLOOR)
    sb = np.maximum(b.std, STD_FLOOR)
    terms = np.log(sb / sa) + (sa**2 + (a.mean - b.mean) ** 2) / (2.0 * sb**2) - 0.5
    return float(terms.sum())


@dataclass(frozen=True)
class DecompositionReport:
    expected_kl: float
    bias: float
    variance: float
    bayes: float
    residual: float  # expected_kl - (bias + variance)
    residual_with_bayes: float  # expected_kl - (bias + variance + bayes)
    center: str
    mean_predictor: np.ndarray

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("expected_kl", "bias", "variance", "bayes", "residual", "residual_with_bayes", "center")}
        d["mean_predictor"] = self.mean_predictor.tolist()
        return d


def mean_predictor(ensemble: np.ndarray, center: str = "geometric", Q=None) -> np.ndarray:
    """Ensemble centre: normalized geometric mean, or the average 1/2 (arithmetic mean + Q)."""
    if center == "geometric":
        if np.all(ensemble == ensemble[0]):
            # exact for a degenerate ensemble; the log/exp round trip would add ~1e-17 noise
            return ensemble[0].copy()
        logs = np.log(np.maximum(ensemble, PROB_FLOOR)).mean(axis=0)
        w = np.exp(logs - logs.max())
        return w / w.sum()
    if center == "average":
        if Q is None:
            raise ValueError("the 'average' centre needs Q")
        return 0.5 * (ensemble.mean(axis=0) + Q)
    raise ValueError(f"unknown centre {center!r}")


def heskes_decompose(Q, ensemble: Sequence, center: str = "geometric") -> DecompositionReport:
    """Split mean_j KL(Q || P_j) into KL(Q || P_hat) + mean_j KL(P_hat || P_j).

    The two-term split is exact for the geometric centre. The negative entropy
    sum_i Q_i ln Q_i is reported alongside as ``bayes``.
    """
    if len(ensemble) == 0:
        raise ValueError("ensemble must be non-empty")
    q = _dist(Q)
    members = [_dist(p) for p in ensemble]
    for m in members:
        if m.size != q.size:
            raise DimensionError(f"ensemble member of length {m.size} vs Q of length {q.size}")
    stack = np.stack(members)
    centre = mean_predictor(stack, center, q)
    expected = float(np.mean([kl_discrete(q, m) for m in members]))
    bias = kl_discrete(q, centre)
    variance = float(np.mean([kl_discrete(centre, m) for m in members]))
    nz = q > 0
    bayes = float(np.sum(q[nz] * np.log(q[nz])))
    return DecompositionReport(
        expected_kl=expected,
        bias=bias,
        variance=variance,
        bayes=bayes,
        residual=expected - (bias + variance),
        residual_with_bayes=expected - (bias + variance + bayes),
        center=center,
        mean_predictor=centre,
    )


def ensemble_variance(probs: np.ndarray) -> np.ndarray:
    """Per-item variance term for stacked predictive distributions ``probs[run, item, class]``."""
    logs = np.log(np.maximum(probs, PROB_FLOOR))
    centre = np.exp(logs.mean(axis=0))
    centre /= centre.sum(axis=-1, keepdims=True)
    log_centre = np.log(np.maximum(centre, PROB_FLOOR))
    kl = (centre[None] * (log_centre[None] - logs)).sum(axis=-1)
    return kl.mean(axis=0)


def _one_run(args):
    fit_fn, splits, seed = args
    predict = fit_fn(splits, seed)
    return np.asarray(predict(splits.test.images), dtype=np.float64)


def variance_error_estimate(
    fit_fn: Callable,
    splits,
    n_runs: int,
    seed: int,
    bootstrap: bool = True,
    vary_seed: bool = True,
    parallel: int = 1,
) -> float:
    """Mean over X_test items of the ensemble variance term.

    ``fit_fn(splits, seed)`` trains one model and returns ``predict(images) -> probs[N, K]``.
    Each run sees a bootstrap resample of X_tr (unless ``bootstrap`` is False).
    """
    if n_runs < 2:
        raise ValueError(f"variance estimate needs n_runs >= 2, got {n_runs}")
    rng = np.random.default_rng(seed)
    n = len(splits.tr)
    jobs = []
    for _ in range(n_runs):
        idx = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
        run_seed = int(rng.integers(2**31)) if vary_seed else seed
        jobs.append((fit_fn, splits.with_tr(splits.tr.take(idx)), run_seed))
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            preds = list(pool.map(_one_run, jobs))
    else:
        preds = [_one_run(j) for j in jobs]
    return float(ensemble_variance(np.stack(preds)).mean())


def fit_gaussian_stats(model, images: np.ndarray) -> GaussianStats:
    return GaussianStats.fit(model.feature_stats_array(images))


def feature_gap(model, subset_a, subset_b) -> float:
    """Symmetrized diagonal-Gaussian KL between the feature-statistics populations of two subsets."""
    a = getattr(subset_a, "images", subset_a)
    b = getattr(subset_b, "images", subset_b)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("feature_gap needs at least 2 samples per subset")
    ga = fit_gaussian_stats(model, a)
    gb = fit_gaussian_stats(model, b)
    return kl_gaussian_diag(ga, gb) + kl_gaussian_diag(gb, ga)
