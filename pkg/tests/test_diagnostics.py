import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from vatlab.autodiff import DimensionError
from vatlab.data import SyntheticTaskSpec, gen_shapes_task
from vatlab.diagnostics import (
    DistributionVector,
    GaussianStats,
    ensemble_variance,
    feature_gap,
    heskes_decompose,
    kl_discrete,
    kl_gaussian_diag,
    pinsker_bound,
    tv_distance,
    variance_error_estimate,
)
from vatlab.vat import ArchConfig, VatModel

from oracles import kl_loop

simplex = arrays(np.float64, st.integers(2, 8).map(lambda n: (n,)), elements=st.floats(1e-6, 1.0))


def random_simplex(rng, n):
    return rng.dirichlet(np.full(n, 0.5))


# ---------------------------------------------------------------- KL and TV


def test_kl_self_is_zero():
    assert kl_discrete([0.2, 0.3, 0.5], [0.2, 0.3, 0.5]) == 0.0


def test_kl_hand_case():
    assert kl_discrete([1, 0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-15)


def test_kl_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        p, q = random_simplex(rng, 5), random_simplex(rng, 5) + 1e-9
        q /= q.sum()
        assert kl_discrete(p, q) == pytest.approx(kl_loop(p, q), rel=1e-10, abs=1e-12)


def test_gibbs_inequality_monte_carlo():
    rng = np.random.default_rng(1)
    for _ in range(10_000):
        n = int(rng.integers(2, 9))
        assert kl_discrete(random_simplex(rng, n), random_simplex(rng, n)) >= -1e-15


def test_kl_zero_in_q_is_floored_not_infinite():
    assert math.isfinite(kl_discrete([0.5, 0.5], [1.0, 0.0]))


def test_kl_length_mismatch():
    with pytest.raises(DimensionError):
        kl_discrete([0.5, 0.5], [0.2, 0.3, 0.5])


def test_distribution_vector_renormalizes_and_rejects():
    assert DistributionVector([2, 2]).p.tolist() == [0.5, 0.5]
    for bad in ([], [0, 0], [-1, 2], [np.nan, 1]):
        with pytest.raises(ValueError):
            DistributionVector(bad)


def test_tv_cases():
    assert tv_distance([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert tv_distance([1, 0], [0.5, 0.5]) == 0.5


def test_pinsker_hand_case():
    assert pinsker_bound([1, 0], [0.5, 0.5]) == pytest.approx(0.5887, abs=1e-4)
    assert tv_distance([1, 0], [0.5, 0.5]) <= pinsker_bound([1, 0], [0.5, 0.5])


def test_near_identical_pair_has_finite_bound():
    # normalizes to two vectors that differ only by rounding
    p, q = [1.0, 1.0, 1.0], [0.999, 0.999, 0.999]
    assert kl_discrete(p, q) >= 0.0
    assert tv_distance(p, q) <= pinsker_bound(p, q) + 1e-12


@given(simplex, st.data())
def test_pinsker_property(p, data):
    q = data.draw(arrays(np.float64, p.shape, elements=st.floats(1e-6, 1.0)))
    assert tv_distance(p, q) <= pinsker_bound(p, q) + 1e-12


# ---------------------------------------------------------------- Gaussians


def test_gaussian_kl_identical_is_zero():
    g = GaussianStats(np.array([0.3, -1.0]), np.array([1.0, 2.0]), 10)
    assert kl_gaussian_diag(g, g) == 0.0


def test_gaussian_kl_unit_shift():
    a = GaussianStats(np.zeros(1), np.ones(1), 2)
    b = GaussianStats(np.ones(1), np.ones(1), 2)
    assert kl_gaussian_diag(a, b) == 0.5


def test_gaussian_kl_matches_monte_carlo():
    rng = np.random.default_rng(2)
    a = GaussianStats(np.array([0.0, 1.0]), np.array([1.0, 0.5]), 0)
    b = GaussianStats(np.array([0.5, 0.0]), np.array([1.5, 1.0]), 0)
    x = rng.normal(a.mean, a.std, size=(1_000_000, 2))

    def logpdf(g):
        return (-0.5 * ((x - g.mean) / g.std) ** 2 - np.log(g.std) - 0.5 * math.log(2 * math.pi)).sum(axis=1)

    mc = float(np.mean(logpdf(a) - logpdf(b)))
    assert abs(mc - kl_gaussian_diag(a, b)) <= 0.01 * kl_gaussian_diag(a, b)


def test_gaussian_fit_floors_std_and_needs_two_samples():
    g = GaussianStats.fit(np.ones((5, 3)))
    assert np.all(g.std == 1e-6)
    with pytest.raises(ValueError):
        GaussianStats.fit(np.ones((1, 3)))


def test_gaussian_kl_dimension_mismatch():
    with pytest.raises(DimensionError):
        kl_gaussian_diag(GaussianStats.fit(np.eye(3)), GaussianStats.fit(np.eye(2)))


# ---------------------------------------------------------------- decomposition


def test_decompose_single_member_equal_to_target():
    q = [0.2, 0.5, 0.3]
    r = heskes_decompose(q, [q])
    assert r.bias == r.variance == r.expected_kl == 0.0


def test_decompose_symmetric_pair():
    r = heskes_decompose([0.5, 0.5], [[0.6, 0.4], [0.4, 0.6]])
    assert np.allclose(r.mean_predictor, [0.5, 0.5], atol=1e-15)
    assert r.bias == pytest.approx(0.0, abs=1e-15)
    assert r.variance == pytest.approx(kl_discrete([0.5, 0.5], [0.6, 0.4]), abs=1e-15)


def test_decompose_identity_random_ensembles():
    rng = np.random.default_rng(3)
    for _ in range(300):
        dim, size = int(rng.integers(2, 9)), int(rng.integers(1, 17))
        r = heskes_decompose(random_simplex(rng, dim), [random_simplex(rng, dim) for _ in range(size)])
        assert abs(r.residual) <= 1e-10
        assert r.residual_with_bayes == pytest.approx(r.residual - r.bayes, abs=1e-12)
        assert r.bias >= -1e-15 and r.variance >= -1e-15 and r.bayes <= 0


def test_decompose_average_centre_available():
    r = heskes_decompose([0.5, 0.5], [[0.9, 0.1], [0.7, 0.3]], center="average")
    assert r.center == "average"
    assert np.allclose(r.mean_predictor, [0.65, 0.35])


def test_decompose_rejects_empty_and_mismatched():
    with pytest.raises(ValueError):
        heskes_decompose([0.5, 0.5], [])
    with pytest.raises(DimensionError):
        heskes_decompose([0.5, 0.5], [[0.2, 0.3, 0.5]])


def test_ensemble_variance_matches_per_item_decomposition():
    rng = np.random.default_rng(4)
    probs = np.stack([np.stack([random_simplex(rng, 3) for _ in range(6)]) for _ in range(4)])
    per_item = ensemble_variance(probs)
    for i in range(6):
        assert per_item[i] == pytest.approx(heskes_decompose(probs[0, i], list(probs[:, i])).variance, abs=1e-12)


# ---------------------------------------------------------------- variance_error_estimate


@pytest.fixture(scope="module")
def tiny_splits():
    return gen_shapes_task(SyntheticTaskSpec(image_size=8, size_range=(1.5, 2.0), jitter=0.5, n_tr=8, n_val=8, n_pre=8, n_test=20, seed=0))


def test_variance_estimate_constant_predictor_is_zero(tiny_splits):
    fit_fn = lambda splits, seed: (lambda images: np.tile([0.3, 0.7], (len(images), 1)))
    assert variance_error_estimate(fit_fn, tiny_splits, 3, seed=0) == pytest.approx(0.0, abs=1e-15)


def test_variance_estimate_identical_runs_is_zero(tiny_splits):
    def fit_fn(splits, seed):
        w = np.random.default_rng(seed).normal()

        def predict(images):
            p = 1 / (1 + np.exp(-w * images.mean(axis=(1, 2, 3))))
            return np.stack([1 - p, p], axis=1)

        return predict

    v = variance_error_estimate(fit_fn, tiny_splits, 2, seed=5, bootstrap=False, vary_seed=False)
    assert v == 0.0
    assert variance_error_estimate(fit_fn, tiny_splits, 4, seed=5) > 0


def test_variance_estimate_needs_two_runs(tiny_splits):
    with pytest.raises(ValueError):
        variance_error_estimate(lambda s, k: None, tiny_splits, 1, seed=0)


# ---------------------------------------------------------------- feature gap


@pytest.fixture(scope="module")
def small_model():
    return VatModel(ArchConfig(image_size=8, channels=(2, 2)), "early").init(0)


def test_feature_gap_self_is_zero(small_model, tiny_splits):
    assert feature_gap(small_model, tiny_splits.val, tiny_splits.val) == 0.0


def test_feature_gap_symmetric(small_model):
    splits = gen_shapes_task(SyntheticTaskSpec(image_size=8, size_range=(1.5, 2.0), jitter=0.5, shift=2.0, n_tr=10, n_val=12, n_pre=2, n_test=2, seed=1))
    assert feature_gap(small_model, splits.tr, splits.val) == feature_gap(small_model, splits.val, splits.tr)


def test_feature_gap_needs_two_samples(small_model, tiny_splits):
    with pytest.raises(ValueError):
        feature_gap(small_model, tiny_splits.val.take([0]), tiny_splits.val)
