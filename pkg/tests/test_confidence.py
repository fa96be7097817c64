import math

import numpy as np
import pytest
from scipy.stats import norm

from olaflow.confidence import (
    ConfidenceInterval,
    UncertaintyCell,
    chebyshev_interval,
    chebyshev_k,
    extreme_bootstrap_variance,
    extreme_bootstrap_variances,
    initial_variance_order_stat,
    initial_variance_sum_avg,
    propagate,
    propagate_map,
    propagate_map_columns,
    var_count_distinct,
)

from oracles import bisect_distinct, fd_variance, rel_err, triple_sum


def test_sum_avg_initial_variance():
    assert initial_variance_sum_avg([4, 4, 4]) == 0.0
    assert initial_variance_sum_avg([0, 2]) == 1.0
    assert initial_variance_sum_avg([3.0]) == 0.0
    sample = np.random.default_rng(1).normal(5, 2, 300)
    mean = sum(sample) / len(sample)
    s2 = sum((v - mean) ** 2 for v in sample) / (len(sample) - 1)
    assert initial_variance_sum_avg(sample) == pytest.approx(s2 / len(sample), rel=1e-12)


def test_order_stat_initial_variance():
    assert initial_variance_order_stat([2.0] * 50, 0.5) == 0.0
    sample = np.random.default_rng(2).normal(size=1000)
    a = initial_variance_order_stat(sample, 0.5, 400, np.random.default_rng(9))
    b = initial_variance_order_stat(sample, 0.5, 400, np.random.default_rng(9))
    assert a == b
    asymptotic = 0.25 / (1000 * norm.pdf(0.0) ** 2)
    assert asymptotic / 3 <= a <= 3 * asymptotic
    with pytest.raises(ValueError):
        initial_variance_order_stat(sample, 0.5, B=50)


def test_extreme_bootstrap_matches_resampling():
    rng = np.random.default_rng(3)
    sample = rng.exponential(size=40)
    brute = np.var([rng.choice(sample, sample.size).min() for _ in range(20000)], ddof=1)
    smallest = np.sort(sample)[:16]
    est = extreme_bootstrap_variance(smallest, sample.size, 20000, np.random.default_rng(4))
    assert rel_err(est, brute) < 0.1


def test_extreme_bootstrap_degenerate_and_vectorized():
    assert extreme_bootstrap_variance([1.0, 1.0], 10) == 0.0
    assert extreme_bootstrap_variance([5.0], 1) == 0.0
    groups = [np.arange(16.0), np.array([2.0, 3.0])]
    out = extreme_bootstrap_variances(groups, [100, 5], 300, np.random.default_rng(0))
    assert out.shape == (2,) and np.all(out > 0)
    assert extreme_bootstrap_variances([], [], 10).size == 0


def test_propagate_examples():
    S = np.array([[2.0, 0.5], [0.5, 1.0]])
    assert np.array_equal(propagate(np.eye(2), S), S)
    assert propagate([[2.0]], [[3.0]])[0, 0] == 12.0
    with pytest.raises(ValueError):
        propagate(np.ones((2, 3)), np.eye(2))


def test_propagate_triple_sum(rng):
    for _ in range(200):
        m, n = rng.integers(1, 6, 2)
        J = rng.normal(size=(m, n))
        L = rng.normal(size=(n, n))
        S = L @ L.T
        ref = triple_sum(J, S)
        got = propagate(J, S)
        assert np.allclose(got, ref, rtol=1e-12, atol=1e-12 * np.abs(ref).max())


def test_propagate_block_diagonal(rng):
    J1, J2 = rng.normal(size=(2, 2)), rng.normal(size=(1, 3))
    S1 = np.diag(rng.uniform(1, 2, 2))
    S2 = np.diag(rng.uniform(1, 2, 3))
    J = np.zeros((3, 5))
    J[:2, :2], J[2:, 2:] = J1, J2
    S = np.zeros((5, 5))
    S[:2, :2], S[2:, 2:] = S1, S2
    out = propagate(J, S)
    assert np.allclose(out[:2, :2], propagate(J1, S1))
    assert np.allclose(out[2:, 2:], propagate(J2, S2))


def test_propagate_map_examples():
    assert propagate_map(lambda x: x + 7, [1.5], [[2.0]]).variance == pytest.approx(2.0, rel=1e-8)
    cell = propagate_map(lambda x: x * x, [3.0], [[1.0]])
    assert cell.variance == pytest.approx(36.0, rel=1e-8) and not cell.unstable
    assert propagate_map(abs, [0.0], [[1.0]]).unstable
    assert propagate_map(lambda x: math.inf if x > 0 else 0.0, [0.0], [[1.0]]).unstable


def test_propagate_map_columns_matches_scalar(rng):
    a, b = rng.uniform(1, 5, 20), rng.uniform(1, 5, 20)
    va, vb = rng.uniform(0, 1, 20), rng.uniform(0, 1, 20)
    var, unstable = propagate_map_columns(lambda p, q: p * (1 - q), [a, b], [va, vb])
    for i in range(20):
        cell = propagate_map(lambda p, q: p * (1 - q), [a[i], b[i]], np.diag([va[i], vb[i]]))
        assert var[i] == pytest.approx(cell.variance, rel=1e-6)
    assert not unstable.any()
    var, unstable = propagate_map_columns(np.abs, [np.array([0.0, 2.0])], [np.ones(2)])
    assert list(unstable) == [True, False]


def test_var_count_distinct():
    assert var_count_distinct(40, 100, 800, 0.0, 0.0) == 0.0
    assert var_count_distinct(0, 100, 800, 5.0, 5.0) == 0.0
    for y, x, X, vy, vX in [(40, 100, 800, 3.0, 400.0), (90, 100, 300, 1.0, 50.0), (10, 500, 5000, 2.0, 1e4)]:
        ref = fd_variance(lambda a, b: bisect_distinct(a, x, b), [y, X], np.diag([vy, vX]), rel=1e-4)
        assert rel_err(var_count_distinct(y, x, X, vy, vX), ref) < 1e-3


def test_chebyshev():
    assert chebyshev_k(0.05) == pytest.approx(4.472, abs=1e-3)
    assert chebyshev_k(0.25) == 2.0
    ci = chebyshev_interval(10.0, 0.0, 0.05)
    assert (ci.lo, ci.hi) == (10.0, 10.0)
    ci = chebyshev_interval(10.0, 4.0, 0.25)
    assert (ci.lo, ci.hi, ci.level) == (6.0, 14.0, 0.75)
    assert ci.contains(14.0) and not ci.contains(14.1)
    assert ConfidenceInterval(1.0, 1.0, 0.95).contains(1.0 + 1e-12, rel_tol=1e-9)
    with pytest.raises(ValueError):
        chebyshev_k(0.0)
    with pytest.raises(ValueError):
        chebyshev_interval(1.0, -1.0, 0.05)


def test_uncertainty_cell():
    with pytest.raises(ValueError):
        UncertaintyCell(-1.0)
