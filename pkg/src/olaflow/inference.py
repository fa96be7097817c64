"""Growth-based inference: turn raw (intrinsic) aggregates into estimates.

Group cardinalities are modelled as monomials ``c_i * t**w`` sharing a
power ``w`` that is fitted in log-log space from the mean group cardinality
observed at each progress tick.  The final cardinality of a group is then
``x / t**w`` and every aggregate estimator is expressed in terms of the
current raw value, the current cardinality and that estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, psi

#: Variance reported for ``w`` when the fit is underdetermined.
UNDETERMINED_VARIANCE = math.inf

#: Power used before two distinct progress values have been observed.
FALLBACK_POWER = 1.0

AGGREGATE_KINDS = (
    "count",
    "sum",
    "avg",
    "var",
    "stddev",
    "min",
    "max",
    "count_distinct",
    "quantile",
)


class InferenceDomainError(ValueError):
    pass


@dataclass(frozen=True)
class AggregateKind:
    tag: str
    q: float | None = None

    def __post_init__(self):
        if self.tag not in AGGREGATE_KINDS:
            raise ValueError(f"unknown aggregate kind {self.tag!r}")
        if self.tag == "quantile":
            if self.q is None or not 0.0 <= self.q <= 1.0:
                raise ValueError("quantile needs q in [0, 1]")
        elif self.q is not None:
            raise ValueError(f"{self.tag} takes no quantile parameter")


@dataclass(frozen=True)
class EstimateCell:
    value: float
    variance: float = 0.0


@dataclass(frozen=True)
class CardinalityEstimate:
    xhat: float
    var_xhat: float = 0.0


@dataclass(frozen=True)
class GroupObservation:
    x: float
    y: float
    t: float


@dataclass
class GrowthModel:
    """Streaming least squares of ``log(mean cardinality)`` on ``log(t)``.

    Only running sums are kept, so each observation costs O(1).
    """

    n_obs: int = 0
    sum_lx: float = 0.0
    sum_ly: float = 0.0
    sum_lxlx: float = 0.0
    sum_lxly: float = 0.0
    sum_lyly: float = 0.0
    _first_lx: float | None = None
    _distinct: bool = False

    def observe(self, t: float, mean_card: float) -> "GrowthModel":
        if not t > 0 or not mean_card > 0:
            raise InferenceDomainError(f"observe needs t > 0 and mean_card > 0, got {t}, {mean_card}")
        lx, ly = math.log(t), math.log(mean_card)
        if self._first_lx is None:
            self._first_lx = lx
        elif lx != self._first_lx:
            self._distinct = True
        self.n_obs += 1
        self.sum_lx += lx
        self.sum_ly += ly
        self.sum_lxlx += lx * lx
        self.sum_lxly += lx * ly
        self.sum_lyly += ly * ly
        return self

    def _centered(self):
        n = self.n_obs
        sxx = self.sum_lxlx - self.sum_lx * self.sum_lx / n
        sxy = self.sum_lxly - self.sum_lx * self.sum_ly / n
        syy = self.sum_lyly - self.sum_ly * self.sum_ly / n
        return sxx, sxy, syy

    def fit(self) -> tuple[float, float, float]:
        """Return ``(w, log_b, var_w)``; falls back to ``w = 1`` when underdetermined."""
        if not self._distinct:
            log_b = self.sum_ly / self.n_obs if self.n_obs else 0.0
            return FALLBACK_POWER, log_b, UNDETERMINED_VARIANCE
        sxx, sxy, syy = self._centered()
        w = sxy / sxx
        log_b = (self.sum_ly - w * self.sum_lx) / self.n_obs
        if self.n_obs < 3:
            # a line through two points leaves no residual to judge it by
            return w, log_b, UNDETERMINED_VARIANCE
        ssr = syy - w * sxy
        if ssr <= 1e-12 * syy:
            ssr = 0.0  # rounding noise of an exact fit
        return w, log_b, (ssr / (self.n_obs - 2)) / sxx

    def fit_power(self) -> tuple[float, float]:
        w, _, var_w = self.fit()
        return w, var_w


def observe(model: GrowthModel, t: float, mean_card: float) -> GrowthModel:
    return model.observe(t, mean_card)


def fit_power(model: GrowthModel) -> tuple[float, float]:
    return model.fit_power()


def _zero_times_inf(a, b):
    """Elementwise ``a * b`` where ``0 * inf`` counts as 0."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    with np.errstate(invalid="ignore"):
        out = a * b
    return np.where((a == 0) | (b == 0), 0.0, out)


def cardinality(x, t: float, w: float, var_w: float):
    """Vectorized final-cardinality estimate: ``(xhat, var_xhat)`` arrays."""
    if not 0 < t <= 1:
        raise InferenceDomainError(f"progress must be in (0, 1], got {t}")
    x = np.asarray(x, dtype=float)
    if t == 1.0:
        return x.copy(), np.zeros_like(x)
    xhat = x / t**w
    var_xhat = _zero_times_inf((xhat * math.log(1.0 / t)) ** 2, var_w)
    return xhat, var_xhat


def estimate_final_cardinality(obs: GroupObservation, w: float, var_w: float = 0.0) -> CardinalityEstimate:
    xhat, var_xhat = cardinality(obs.x, obs.t, w, var_w)
    return CardinalityEstimate(float(xhat), float(var_xhat))


def estimate_count(card: CardinalityEstimate) -> EstimateCell:
    return EstimateCell(card.xhat, card.var_xhat)


def sum_estimate(y, x, xhat, var_xhat, var_y):
    """Vectorized scaled sum ``(y / x) * xhat`` and its propagated variance."""
    y, x, xhat = (np.asarray(a, dtype=float) for a in (y, x, xhat))
    value = y * (xhat / x)
    var = (_zero_times_inf(var_y, xhat**2) + _zero_times_inf(var_xhat, y**2)) / x**2
    return value, var


def estimate_sum(y: float, x: float, card: CardinalityEstimate, var_y: float = 0.0) -> EstimateCell:
    if x < 1:
        raise InferenceDomainError("sum estimate needs at least one row")
    value, var = sum_estimate(y, x, card.xhat, card.var_xhat, var_y)
    return EstimateCell(float(value), float(var))


def ratio_estimate(a, b, var_a, var_b, cov_ab):
    """Vectorized ``a / b`` with first-order variance including the covariance."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    value = a / b
    var = var_a / b**2 + a**2 * var_b / b**4 - 2.0 * a * cov_ab / b**3
    return value, np.maximum(var, 0.0)


def estimate_weighted_avg(y_num: float, y_den: float, x: float, card: CardinalityEstimate, cov) -> EstimateCell:
    """Weighted average ``y_num / y_den``.

    Scaling both sums by ``xhat / x`` cancels, so neither ``x`` nor ``card``
    affect the value or its variance; they are accepted for a uniform
    estimator signature.
    """
    if y_den == 0:
        raise ZeroDivisionError("weighted average with zero total weight")
    cov = np.asarray(cov, dtype=float)
    value, var = ratio_estimate(y_num, y_den, cov[0, 0], cov[1, 1], cov[0, 1])
    return EstimateCell(float(value), float(var))


# --- count distinct -------------------------------------------------------
#
# For a population of X rows holding Y equally frequent values (frequency
# z = X / Y), h(z) is the chance that a given value is absent from a sample
# of x rows drawn without replacement.  The estimate Y solves
# y = Y * (1 - h(X / Y)).


_STIRLING_MIN = 30.0


def _stirling_tail(a: float) -> float:
    return 1 / (12 * a) - 1 / (360 * a**3) + 1 / (1260 * a**5) - 1 / (1680 * a**7)


def _log_gamma_step(a: float, z: float) -> float:
    """``lgamma(a - z) - lgamma(a)`` without its ``-z log a`` term.

    Stirling's series makes the cancellation of the huge ``lgamma`` values
    exact, so for large populations the result keeps full precision.
    """
    b = a - z
    return (b - 0.5) * math.log1p(-z / a) + z + _stirling_tail(b) - _stirling_tail(a)


def _h(z: float, X: float, x: float) -> float:
    if X - x - z + 1 <= 0:
        return 0.0
    if X - x - z + 1 < _STIRLING_MIN:
        return math.exp(gammaln(X - z + 1) + gammaln(X - x + 1) - gammaln(X - x - z + 1) - gammaln(X + 1))
    log_h = z * math.log1p(-x / (X + 1)) + _log_gamma_step(X + 1, z) - _log_gamma_step(X - x + 1, z)
    return math.exp(log_h)


def _dh_dz(z: float, X: float, x: float, h: float | None = None) -> float:
    if X - x - z + 1 <= 0:
        return 0.0
    h = _h(z, X, x) if h is None else h
    return h * (psi(X - x - z + 1) - psi(X - z + 1))


def _dh_dX(z: float, X: float, x: float, h: float | None = None) -> float:
    """Partial derivative of h in X holding z fixed."""
    if X - x - z + 1 <= 0:
        return 0.0
    h = _h(z, X, x) if h is None else h
    return h * (psi(X - z + 1) + psi(X - x + 1) - psi(X - x - z + 1) - psi(X + 1))


def distinct_residual(Y: float, y: float, x: float, X: float) -> float:
    """``Y * (1 - h(X / Y)) - y``: zero at the estimate."""
    return Y * (1.0 - _h(X / Y, X, x)) - y


def _residual_slope(Y: float, x: float, X: float) -> float:
    z = X / Y
    h = _h(z, X, x)
    return (1.0 - h) + z * _dh_dz(z, X, x, h)


def _bisect(y, x, X, lo, hi, steps=200):
    f_lo = distinct_residual(lo, y, x, X)
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        f_mid = distinct_residual(mid, y, x, X)
        if (f_mid <= 0) == (f_lo <= 0):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def solve_distinct(y: float, x: float, X: float, tol: float = 1e-9, max_iter: int = 100) -> float:
    """Root of ``y = Y (1 - h(X / Y))`` on ``[y, X]``.

    Newton iterations start at ``y * X / x``; if an iterate leaves the
    bracket, the slope is not positive or the cap is hit, bisection on the
    bracket takes over.
    """
    if y < 0 or x < 0 or y > x:
        raise InferenceDomainError(f"need 0 <= y <= x, got y={y}, x={x}")
    if y == 0:
        return 0.0
    X = max(float(X), float(x))
    lo, hi = float(y), X
    if distinct_residual(hi, y, x, X) <= 0:
        return hi
    Y = min(max(y * X / x, lo), hi)
    abs_tol = tol * X
    for _ in range(max_iter):
        slope = _residual_slope(Y, x, X)
        if not slope > 0 or not math.isfinite(slope):
            break
        step = distinct_residual(Y, y, x, X) / slope
        nxt = Y - step
        if not (lo <= nxt <= hi) or not math.isfinite(nxt):
            break
        Y = nxt
        if abs(step) <= abs_tol:
            # one polishing step brings the root close to machine precision
            slope = _residual_slope(Y, x, X)
            if slope > 0:
                polished = Y - distinct_residual(Y, y, x, X) / slope
                if lo <= polished <= hi:
                    Y = polished
            return Y
    return _bisect(y, x, X, lo, hi)


def distinct_gradient(Y: float, y: float, x: float, X: float) -> tuple[float, float]:
    """Implicit derivatives ``(dY/dy, dY/dX)`` of the distinct-count root."""
    if Y == 0:
        return 0.0, 0.0
    z = X / Y
    h = _h(z, X, x)
    slope = (1.0 - h) + z * _dh_dz(z, X, x, h)
    dh_total = _dh_dz(z, X, x, h) / Y + _dh_dX(z, X, x, h)
    return 1.0 / slope, Y * dh_total / slope


def estimate_count_distinct(
    y: float, x: float, card: CardinalityEstimate, var_y: float = 0.0
) -> EstimateCell:
    if y > x:
        raise InferenceDomainError(f"distinct count {y} exceeds group cardinality {x}")
    if y == 0:
        return EstimateCell(0.0, 0.0)
    X = max(card.xhat, x)
    Y = solve_distinct(y, x, X)
    d_y, d_X = distinct_gradient(Y, y, x, X)
    var = float(_zero_times_inf(d_y**2, var_y) + _zero_times_inf(d_X**2, card.var_xhat))
    return EstimateCell(Y, var)


def estimate_order_stat(y_latest, variance: float = 0.0) -> EstimateCell:
    """Order statistics (min, max, quantiles) report their latest value."""
    if y_latest is None:
        raise InferenceDomainError("order statistic of an empty group")
    return EstimateCell(y_latest, variance)
