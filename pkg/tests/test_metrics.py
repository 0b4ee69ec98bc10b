import numpy as np
import pytest
from hypothesis import given, strategies as st

from vatlab.errors import UndefinedMetricError
from vatlab.metrics import metric_auc, metric_dice, metric_kappa_qw

from oracles import auc_pairs, dice_counts, kappa_direct


def test_auc_perfect_separation():
    assert metric_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0


def test_auc_all_ties():
    assert metric_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_auc_single_class_undefined():
    with pytest.raises(UndefinedMetricError):
        metric_auc([0.1, 0.2], [1, 1])


@pytest.mark.parametrize("seed", range(20))
def test_auc_matches_pair_counting(seed):
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.r_[np.zeros(15), np.ones(15)]).astype(int)
    scores = rng.integers(0, 6, size=30) / 5.0  # coarse grid forces ties
    assert abs(metric_auc(scores, labels) - auc_pairs(scores, labels)) <= 1e-12


@given(st.lists(st.tuples(st.floats(-10, 10), st.integers(0, 1)), min_size=2, max_size=25))
def test_auc_scale_and_reversal(pairs):
    scores, labels = map(np.array, zip(*pairs))
    if labels.min() == labels.max():
        return
    assert metric_auc(scores, labels) == pytest.approx(metric_auc(2 * scores, labels), abs=1e-12)
    assert metric_auc(-scores, labels) == pytest.approx(1 - metric_auc(scores, labels), abs=1e-12)


def test_kappa_perfect_agreement():
    assert metric_kappa_qw([0, 1, 2, 2], [0, 1, 2, 2]) == 1.0


def test_kappa_hand_case_matches_direct_formula():
    truth, pred = [0, 1, 2, 2], [0, 2, 1, 2]
    assert abs(metric_kappa_qw(pred, truth, 3) - kappa_direct(pred, truth, 3)) <= 1e-12


def test_kappa_matches_sklearn():
    from sklearn.metrics import cohen_kappa_score

    rng = np.random.default_rng(0)
    for _ in range(50):
        truth, pred = rng.integers(0, 5, size=40), rng.integers(0, 5, size=40)
        ref = cohen_kappa_score(truth, pred, weights="quadratic", labels=list(range(5)))
        assert abs(metric_kappa_qw(pred, truth, 5) - ref) <= 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_kappa_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    truth, pred = rng.integers(0, 4, size=20), rng.integers(0, 4, size=20)
    perm = rng.permutation(20)
    assert metric_kappa_qw(pred, truth, 4) == pytest.approx(metric_kappa_qw(pred[perm], truth[perm], 4), abs=1e-12)


def test_kappa_degenerate_undefined():
    with pytest.raises(UndefinedMetricError):
        metric_kappa_qw([1, 1, 1], [1, 1, 1], 3)


def test_kappa_out_of_range_grade():
    with pytest.raises(ValueError):
        metric_kappa_qw([0, 3], [0, 1], 3)


def test_dice_identical_masks():
    m = np.random.default_rng(1).integers(0, 4, size=(8, 8))
    assert metric_dice(m, m, 4) == 1.0


def test_dice_disjoint_single_class():
    a = np.zeros((4, 4), int)
    b = np.zeros((4, 4), int)
    a[:2] = 1
    b[2:] = 1
    assert metric_dice(a, b, 2) == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_dice_matches_pixel_counting(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 4, size=(8, 8)), rng.integers(0, 4, size=(8, 8))
    assert abs(metric_dice(a, b, 4) - dice_counts(a, b, 4)) <= 1e-12
