"""Evaluation metrics: AUC-ROC, quadratic weighted kappa, macro Dice."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError


@dataclass(frozen=True)
class EvalResult:
    metric: str
    value: float
    n: int


def metric_auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores across classes count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    ranks = rankdata(scores)  # average ranks resolve ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def metric_kappa_qw(pred, truth, n_grades: int | None = None) -> float:
    pred = np.asarray(pred).astype(int).ravel()
    truth = np.asarray(truth).astype(int).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"{pred.size} predictions but {truth.size} targets")
    K = n_grades if n_grades is not None else int(max(pred.max(), truth.max())) + 1
    if K < 2:
        raise UndefinedMetricError("quadratic kappa needs at least 2 grades")
    if pred.min() < 0 or truth.min() < 0 or max(pred.max(), truth.max()) >= K:
        raise ValueError(f"grades must lie in 0..{K - 1}")
    observed = np.zeros((K, K))
    np.add.at(observed, (truth, pred), 1.0)
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / observed.sum()
    i, j = np.indices((K, K))
    weights = (i - j) ** 2 / (K - 1) ** 2
    denom = (weights * expected).sum()
    if denom == 0:
        raise UndefinedMetricError("quadratic kappa undefined: zero expected disagreement")
    return float(1.0 - (weights * observed).sum() / denom)


def metric_dice(pred_mask, truth_mask, n_classes: int) -> float:
    """Mean Dice over foreground classes 1..K-1; a class absent from both masks scores 1."""
    pred_mask = np.asarray(pred_mask)
    truth_mask = np.asarray(truth_mask)
    if pred_mask.shape != truth_mask.shape:
        raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {truth_mask.shape}")
    scores = []
    for k in range(1, n_classes):
        p = pred_mask == k
        t = truth_mask == k
        total = p.sum() + t.sum()
        scores.append(1.0 if total == 0 else 2.0 * (p & t).sum() / total)
    return float(np.mean(scores)) if scores else 1.0
