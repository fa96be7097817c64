"""Uncertainty of mutable attributes and Chebyshev confidence intervals."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .inference import _zero_times_inf, distinct_gradient, solve_distinct

DEFAULT_BOOTSTRAP = 200

#: Relative disagreement between one-sided slopes that flags a map as unstable.
UNSTABLE_SLOPE_GAP = 0.10
_UNSTABLE_ABS_SLACK = 1e-4


@dataclass
class UncertaintyCell:
    """Variance of one value, optionally with covariances to named peers."""

    variance: float
    cross: dict = field(default_factory=dict)
    unstable: bool = False

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError(f"negative variance {self.variance}")


@dataclass(frozen=True)
class ConfidenceInterval:
    lo: float
    hi: float
    level: float

    def contains(self, value: float, rel_tol: float = 0.0) -> bool:
        slack = rel_tol * max(abs(value), abs(self.lo), abs(self.hi))
        return self.lo - slack <= value <= self.hi + slack


def initial_variance_sum_avg(sample) -> float:
    """Variance of the sample mean, ``s**2 / n`` (zero for single values)."""
    sample = np.asarray(sample, dtype=float)
    n = sample.size
    if n < 2:
        return 0.0
    return float(np.var(sample, ddof=1) / n)


def initial_variance_order_stat(sample, q: float, B: int = DEFAULT_BOOTSTRAP, rng=None) -> float:
    """Bootstrap variance of the ``q`` sample quantile over ``B`` resamples."""
    sample = np.asarray(sample, dtype=float)
    if B < 100:
        raise ValueError("bootstrap needs at least 100 resamples")
    if sample.size < 2 or np.all(sample == sample[0]):
        return 0.0
    rng = np.random.default_rng(0) if rng is None else rng
    idx = rng.integers(0, sample.size, size=(B, sample.size))
    stats = np.quantile(sample[idx], q, axis=1)
    return float(np.var(stats, ddof=1))


def extreme_bootstrap_variance(extremes, n: int, B: int = DEFAULT_BOOTSTRAP, rng=None) -> float:
    """Bootstrap variance of a minimum from its ``k`` smallest values.

    ``extremes`` holds the sorted smallest values of a sample of size ``n``.
    The rank of the resample minimum has the closed-form law
    ``P(rank >= j) = (1 - (j - 1) / n) ** n``, so ranks are drawn from it
    instead of materializing resamples.  Ranks beyond the retained values
    are clipped to the last one, an event of probability ``(1 - k/n)**n``.
    For maxima pass negated values.
    """
    return float(extreme_bootstrap_variances([extremes], [n], B, rng)[0])


def extreme_bootstrap_variances(extremes, n, B: int = DEFAULT_BOOTSTRAP, rng=None) -> np.ndarray:
    """Vectorized :func:`extreme_bootstrap_variance` over groups."""
    rng = np.random.default_rng(0) if rng is None else rng
    G = len(extremes)
    if G == 0:
        return np.zeros(0)
    K = max(len(e) for e in extremes)
    if K == 0:
        return np.zeros(G)
    vals = np.empty((G, K))
    for g, e in enumerate(extremes):
        e = np.asarray(e, dtype=float)
        vals[g, : len(e)] = e
        vals[g, len(e) :] = e[-1] if len(e) else 0.0
    n = np.asarray(n, dtype=float)[:, None]
    k = np.array([len(e) for e in extremes])[:, None]
    j = np.arange(1, K + 1)[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        # P(rank >= j), clipped so the last retained value absorbs the tail
        survival = np.where(j <= k, np.clip(1.0 - (j - 1) / n, 0.0, 1.0) ** n, 0.0)
    cdf = 1.0 - survival[:, 1:]
    u = rng.random((G, B))
    ranks = (u[:, :, None] >= cdf[:, None, :]).sum(axis=2)
    draws = np.take_along_axis(vals, ranks, axis=1)
    out = np.var(draws, axis=1, ddof=1)
    degenerate = (n[:, 0] < 2) | (k[:, 0] == 0) | (vals.max(axis=1) == vals.min(axis=1))
    return np.where(degenerate, 0.0, out)


def propagate(jacobian, sigma_in) -> np.ndarray:
    """Covariance of ``f(U)`` to first order: ``J @ Sigma @ J.T``."""
    J = np.atleast_2d(np.asarray(jacobian, dtype=float))
    S = np.atleast_2d(np.asarray(sigma_in, dtype=float))
    if S.shape[0] != S.shape[1] or J.shape[1] != S.shape[0]:
        raise ValueError(f"dimension mismatch: J {J.shape}, Sigma {S.shape}")
    return J @ S @ J.T


def _slopes(f, point, h):
    f0 = f(point)
    fwd, bwd = [], []
    for k in range(len(point)):
        up, down = point.copy(), point.copy()
        up[k] += h[k]
        down[k] -= h[k]
        fu, fd = f(up), f(down)
        fwd.append((fu - f0) / h[k])
        bwd.append((f0 - fd) / h[k])
    return f0, np.array(fwd), np.array(bwd)


def propagate_map(f: Callable, point: Sequence[float], sigma_in) -> UncertaintyCell:
    """Variance of scalar ``f`` at ``point`` via central finite differences.

    The cell is flagged unstable when forward and backward slopes disagree
    by more than 10% or are not finite (e.g. ``abs`` at 0, step functions).
    """
    point = np.asarray(point, dtype=float).reshape(-1)
    sigma = np.atleast_2d(np.asarray(sigma_in, dtype=float))
    h = np.maximum(1e-6, 1e-6 * np.abs(point))
    _, fwd, bwd = _slopes(lambda p: float(f(*p)), point, h)
    grad = 0.5 * (fwd + bwd)
    gap = np.abs(fwd - bwd)
    bound = np.maximum(UNSTABLE_SLOPE_GAP * np.maximum(np.abs(fwd), np.abs(bwd)), _UNSTABLE_ABS_SLACK)
    unstable = bool(np.any(gap > bound) or not np.all(np.isfinite(grad)))
    if not np.all(np.isfinite(grad)):
        return UncertaintyCell(math.inf, unstable=True)
    var = float(propagate(grad[None, :], sigma)[0, 0])
    return UncertaintyCell(max(var, 0.0), unstable=unstable)


def propagate_map_columns(fn: Callable, args: Sequence[np.ndarray], variances: Sequence[np.ndarray]):
    """Vectorized :func:`propagate_map` over rows, inputs assumed uncorrelated.

    Returns ``(variance, unstable)`` arrays.
    """
    args = [np.asarray(a, dtype=float) for a in args]
    n = len(args[0]) if args else 0
    var = np.zeros(n)
    unstable = np.zeros(n, dtype=bool)
    with np.errstate(all="ignore"):
        f0 = np.asarray(fn(*args), dtype=float)
        for k, (a, v) in enumerate(zip(args, variances)):
            if v is None:
                continue
            h = np.maximum(1e-6, 1e-6 * np.abs(a))
            up = list(args)
            up[k] = a + h
            down = list(args)
            down[k] = a - h
            fwd = (np.asarray(fn(*up), dtype=float) - f0) / h
            bwd = (f0 - np.asarray(fn(*down), dtype=float)) / h
            grad = 0.5 * (fwd + bwd)
            bound = np.maximum(UNSTABLE_SLOPE_GAP * np.maximum(np.abs(fwd), np.abs(bwd)), _UNSTABLE_ABS_SLACK)
            unstable |= (np.abs(fwd - bwd) > bound) | ~np.isfinite(grad)
            var = var + _zero_times_inf(grad**2, v)
    return var, unstable


def var_count_distinct(y: float, x: float, xhat: float, var_y: float, var_xhat: float) -> float:
    """Variance of the distinct-count estimate through implicit differentiation."""
    if y == 0:
        return 0.0
    X = max(xhat, x)
    Y = solve_distinct(y, x, X)
    d_y, d_X = distinct_gradient(Y, y, x, X)
    return float(_zero_times_inf(d_y**2, var_y) + _zero_times_inf(d_X**2, var_xhat))


def chebyshev_k(delta: float) -> float:
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    return math.sqrt(1.0 / delta)


def chebyshev_interval(value: float, variance: float, delta: float) -> ConfidenceInterval:
    """Distribution-free interval ``value +- k * sigma`` at level ``1 - delta``."""
    if variance < 0:
        raise ValueError("variance must be non-negative")
    half = chebyshev_k(delta) * math.sqrt(variance)
    return ConfidenceInterval(value - half, value + half, 1.0 - delta)
