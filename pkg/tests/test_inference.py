import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from olaflow.inference import (
    AggregateKind,
    CardinalityEstimate,
    GroupObservation,
    GrowthModel,
    InferenceDomainError,
    distinct_residual,
    estimate_count,
    estimate_count_distinct,
    estimate_final_cardinality,
    estimate_order_stat,
    estimate_sum,
    estimate_weighted_avg,
    fit_power,
    observe,
    solve_distinct,
)
from olaflow.inference import _h

from oracles import bisect_distinct, fd_variance, h, ols, rel_err


def test_two_points_define_the_line():
    m = observe(observe(GrowthModel(), 0.5, 5.0), 1.0, 10.0)
    w, var_w = fit_power(m)
    assert w == pytest.approx(1.0, abs=1e-12)
    assert math.isinf(var_w)  # no residual degrees of freedom


def test_single_observation_falls_back():
    w, var_w = fit_power(observe(GrowthModel(), 1.0, 7.0))
    assert w == 1.0 and math.isinf(var_w)
    assert fit_power(GrowthModel()) == (1.0, math.inf)


def test_repeated_t_is_underdetermined():
    m = GrowthModel()
    for card in (3.0, 4.0, 5.0):
        m.observe(0.4, card)
    assert fit_power(m) == (1.0, math.inf)


def test_quadratic_growth_fit():
    m = GrowthModel()
    ts = np.linspace(0.02, 1.0, 50)
    for t in ts:
        m.observe(t, 3 * t**2)
    w, var_w = fit_power(m)
    w_ref, _, _ = ols(np.log(ts), np.log(3 * ts**2))
    assert abs(w - 2) < 1e-9 and abs(w - w_ref) < 1e-12
    assert var_w == 0.0


def test_noisy_fit_matches_ols():
    rng = np.random.default_rng(7)
    ts = np.sort(rng.uniform(0.05, 1.0, 40))
    ys = 12 * ts * np.exp(rng.normal(0, 0.2, ts.size))
    m = GrowthModel()
    for t, y in zip(ts, ys):
        m.observe(t, y)
    w, log_b, var_w = m.fit()
    w_ref, b_ref, var_ref = ols(np.log(ts), np.log(ys))
    assert abs(w - w_ref) < 1e-12
    assert abs(log_b - b_ref) < 1e-12
    assert rel_err(var_w, var_ref) < 1e-9


@pytest.mark.parametrize("t,card", [(0.0, 1.0), (-1, 1.0), (0.5, 0.0)])
def test_observe_domain(t, card):
    with pytest.raises(InferenceDomainError):
        GrowthModel().observe(t, card)


@pytest.mark.parametrize("x,t,w,expected", [(2, 0.1, 1, 20.0), (7, 0.3, 0, 7.0), (50, 0.5, 1, 100.0)])
def test_cardinality_examples(x, t, w, expected):
    card = estimate_final_cardinality(GroupObservation(x, 0, t), w, 0.0)
    assert card.xhat == pytest.approx(expected, rel=1e-14)
    assert card.var_xhat == 0.0


def test_cardinality_variance():
    card = estimate_final_cardinality(GroupObservation(10, 0, 0.25), 1.0, 0.01)
    assert card.var_xhat == pytest.approx((40 * math.log(4)) ** 2 * 0.01)
    final = estimate_final_cardinality(GroupObservation(10, 0, 1.0), 1.3, math.inf)
    assert (final.xhat, final.var_xhat) == (10.0, 0.0)


def test_count_passthrough():
    assert estimate_count(CardinalityEstimate(20.0)).value == 20.0
    cell = estimate_count(CardinalityEstimate(100.0, 48.05))
    assert (cell.value, cell.variance) == (100.0, 48.05)


def test_sum_examples():
    assert estimate_sum(30, 3, CardinalityEstimate(30.0)).value == 300.0
    assert estimate_sum(17.5, 4, CardinalityEstimate(4.0)).value == 17.5


@given(
    y=st.floats(-1e3, 1e3), x=st.integers(1, 500), scale=st.floats(1.0, 20.0),
    var_y=st.floats(0, 100), var_xhat=st.floats(0, 100),
)
@settings(max_examples=200, deadline=None)
def test_sum_variance_matches_finite_differences(y, x, scale, var_y, var_xhat):
    xhat = x * scale
    cell = estimate_sum(y, x, CardinalityEstimate(xhat, var_xhat), var_y)
    ref = fd_variance(lambda yy, xx: yy / x * xx, [y, xhat], np.diag([var_y, var_xhat]))
    assert cell.value == pytest.approx(y / x * xhat)
    assert cell.variance == pytest.approx(ref, rel=1e-6, abs=1e-9)


def test_weighted_avg_examples():
    assert estimate_weighted_avg(10, 5, 3, CardinalityEstimate(30.0), np.eye(2)).value == 2.0
    assert estimate_weighted_avg(10, 5, 3, CardinalityEstimate(99.0), np.zeros((2, 2))).variance == 0.0
    with pytest.raises(ZeroDivisionError):
        estimate_weighted_avg(1, 0, 1, CardinalityEstimate(1.0), np.zeros((2, 2)))


def test_weighted_avg_variance_matches_finite_differences(rng):
    for _ in range(200):
        a, b = rng.uniform(1, 100, 2)
        L = rng.normal(size=(2, 2))
        cov = L @ L.T
        cell = estimate_weighted_avg(a, b, 1, CardinalityEstimate(1.0), cov)
        ref = fd_variance(lambda p, q: p / q, [a, b], cov)
        assert rel_err(cell.variance, ref) < 1e-6


def test_distinct_zero():
    assert solve_distinct(0, 10, 100) == 0.0
    assert estimate_count_distinct(0, 10, CardinalityEstimate(100.0, 5.0)).value == 0.0


@pytest.mark.parametrize("y,x", [(1, 1), (5, 10), (37, 40), (100, 100)])
def test_distinct_all_observed(y, x):
    assert abs(distinct_residual(y, y, x, x)) < 1e-9  # y is a root when X = x
    assert solve_distinct(y, x, x) == pytest.approx(y, rel=1e-9)
    cell = estimate_count_distinct(y, x, CardinalityEstimate(float(x)))
    assert cell.value == y and cell.variance == 0.0


def test_distinct_bisection_example():
    Y = solve_distinct(50, 100, 1000)
    assert rel_err(Y, bisect_distinct(50, 100, 1000)) < 1e-6
    assert abs(distinct_residual(Y, 50, 100, 1000)) <= 1e-6 * 50


@given(x=st.integers(2, 5000), ratio=st.floats(1.0, 50.0), frac=st.floats(0.01, 1.0))
@settings(max_examples=300, deadline=None)
def test_distinct_solver_property(x, ratio, frac):
    X = x * ratio
    y = max(1, round(frac * x))
    Y = solve_distinct(y, x, X)
    assert y - 1e-9 <= Y <= X + 1e-9
    assert abs(distinct_residual(Y, y, x, X)) <= 1e-6 * max(1, y)
    assert rel_err(Y, bisect_distinct(y, x, X)) < 1e-6


@pytest.mark.parametrize("z,X,x", [
    (3.37, 7.83e8, 3.37e8), (15.2, 5.48e8, 6.39e7), (316613.3, 7.25e8, 317262.0),
    (1103.95, 4.51e8, 22778.0), (201.4, 228.3, 1.0), (4.5, 120.0, 90.0),
])
def test_miss_probability_precision(z, X, x):
    want = h(z, X, x)
    assert abs(math.log(_h(z, X, x)) - float(mp.log(want))) < 1e-12 * max(1.0, abs(float(mp.log(want))))


def test_distinct_domain():
    with pytest.raises(InferenceDomainError):
        solve_distinct(5, 4, 10)
    with pytest.raises(InferenceDomainError):
        estimate_count_distinct(5, 4, CardinalityEstimate(10.0))


def test_distinct_variance_matches_finite_differences():
    y, x, X = 60.0, 200.0, 1500.0
    var_y, var_X = 4.0, 900.0
    cell = estimate_count_distinct(y, x, CardinalityEstimate(X, var_X), var_y)
    ref = fd_variance(lambda a, b: bisect_distinct(a, x, b), [y, X], np.diag([var_y, var_X]), rel=1e-4)
    assert rel_err(cell.variance, ref) < 1e-3


def test_order_stat():
    assert estimate_order_stat(min([5, 3, 9])).value == 3
    assert estimate_order_stat(4.5).value == 4.5
    with pytest.raises(InferenceDomainError):
        estimate_order_stat(None)


def test_aggregate_kind():
    assert AggregateKind("quantile", 0.5).q == 0.5
    with pytest.raises(ValueError):
        AggregateKind("median")
    with pytest.raises(ValueError):
        AggregateKind("quantile")
    with pytest.raises(ValueError):
        AggregateKind("sum", 0.3)
