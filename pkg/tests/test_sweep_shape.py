"""Shape of the lambda sweep on the shifted task (slow; shares runs with the acceptance tests).

A sweep repetition averages test AUC over one disjoint pair of seeds, giving
five repetitions from seeds 0 to 9.
"""

from collections import Counter

import numpy as np
import pytest

from shifted_runs import SEEDS, shifted_run

REPETITIONS = [SEEDS[i : i + 2] for i in range(0, len(SEEDS), 2)]


def sweep_argmax(grid, seeds, shift):
    """lambda with the best mean test AUC over ``seeds``; ties go to the smaller lambda."""
    means = {lam: np.mean([shifted_run("vat-early", lam, s, shift).test_metric for s in seeds]) for lam in grid}
    return max(sorted(grid), key=lambda lam: (means[lam], -lam))


def majority(values):
    counts = Counter(values)
    return max(sorted(counts), key=lambda v: (counts[v], -v))


@pytest.mark.slow
def test_sweep_optimum_is_positive():
    grid = (0.0, 0.01, 0.1, 1.0)
    winners = [sweep_argmax(grid, rep, 3.0) for rep in REPETITIONS]
    assert sum(lam > 0 for lam in winners) >= 4, winners


@pytest.mark.slow
def test_stronger_shift_does_not_lower_optimum():
    grid = (0.0, 0.1, 1.0)
    weak = [sweep_argmax(grid, rep, 3.0) for rep in REPETITIONS]
    strong = [sweep_argmax(grid, rep, 6.0) for rep in REPETITIONS]
    assert majority(strong) >= majority(weak), f"shift 3 winners {weak}, shift 6 winners {strong}"
