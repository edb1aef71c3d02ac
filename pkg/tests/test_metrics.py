import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from pscr import metrics
from pscr.errors import DimensionError, UndefinedCorrelationError, ValidationError


def test_rank_average_cases():
    assert metrics.rank_average([10, 20, 30]).tolist() == [1, 2, 3]
    assert metrics.rank_average([5, 5]).tolist() == [1.5, 1.5]
    assert metrics.rank_average([3, 1, 3, 2]).tolist() == [3.5, 1, 3.5, 2]


@given(st.lists(st.integers(-5, 5), min_size=1, max_size=30))
def test_rank_average_matches_counting_definition(values):
    # rank = (# strictly smaller) + (# equal + 1) / 2
    a = np.array(values)
    expected = [np.sum(a < v) + (np.sum(a == v) + 1) / 2 for v in a]
    assert metrics.rank_average(values).tolist() == expected


def test_srcc_trivial():
    t = [0.3, 1.0, 2.5, 4.0]
    assert metrics.srcc(t, t) == 1.0
    assert metrics.srcc(t, t[::-1]) == -1.0


def test_srcc_hand_case():
    assert metrics.srcc([1, 2, 3, 4], [1, 2, 4, 3]) == pytest.approx(0.8, abs=1e-9)


def test_plcc_cases():
    t = np.array([0.5, 1.0, 4.0, -2.0])
    assert metrics.plcc(t, 2 * t + 1) == pytest.approx(1.0, abs=1e-15)
    assert metrics.plcc(t, -t) == pytest.approx(-1.0, abs=1e-15)
    assert metrics.plcc([0, 1, 2], [0, 1, 1]) == pytest.approx(math.sqrt(3) / 2, abs=1e-9)


def test_constant_input_is_undefined():
    with pytest.raises(UndefinedCorrelationError, match="predictions are constant"):
        metrics.srcc([1, 2, 3], [4, 4, 4])
    with pytest.raises(UndefinedCorrelationError, match="truths are constant"):
        metrics.plcc([1, 1, 1], [1, 2, 3])


def test_input_validation():
    with pytest.raises(DimensionError):
        metrics.plcc([1, 2], [1, 2, 3])
    with pytest.raises(ValidationError):
        metrics.srcc([1], [1])
    with pytest.raises(ValidationError):
        metrics.srcc([1, np.nan], [1, 2])


# scores on a 1e-3 grid; subnormal spreads underflow the centred sums by design
_score = st.integers(-100_000, 100_000).map(lambda k: k / 1000)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(_score, _score), min_size=3, max_size=40))
def test_agrees_with_scipy(pairs):
    t, p = map(np.array, zip(*pairs))
    if np.ptp(t) == 0 or np.ptp(p) == 0:
        return
    assert metrics.srcc(t, p) == pytest.approx(stats.spearmanr(t, p)[0], abs=1e-9)
    r = stats.pearsonr(t, p)[0]
    assert metrics.plcc(t, p) == pytest.approx(r, abs=1e-9)


@given(st.lists(st.integers(-50, 50), min_size=2, max_size=20), st.floats(0.1, 10), st.floats(-5, 5))
def test_srcc_invariant_under_monotone_maps(values, a, b):
    t = np.array(values, dtype=float)
    p = np.arange(t.size, dtype=float)[::-1]
    if np.ptp(t) == 0:
        return
    base = metrics.srcc(t, p)
    assert metrics.srcc(a * t + b, np.exp(p / 10)) == pytest.approx(base, abs=1e-12)


def test_results_within_unit_interval(rng):
    for _ in range(50):
        t, p = rng.standard_normal(7), rng.standard_normal(7)
        assert -1.0 <= metrics.srcc(t, p) <= 1.0
        assert -1.0 <= metrics.plcc(t, p) <= 1.0
