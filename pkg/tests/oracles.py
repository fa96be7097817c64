"""Independent reference computations used by the tests."""

import math

import mpmath as mp
import numpy as np


def ols(xs, ys):
    """Slope, intercept and slope variance of ``y = a + b x`` (textbook form)."""
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    n = len(xs)
    A = np.column_stack([np.ones(n), xs])
    coef, *_ = np.linalg.lstsq(A, ys, rcond=None)
    resid = ys - A @ coef
    var_b = np.inf
    if n > 2:
        s2 = resid @ resid / (n - 2)
        var_b = s2 * np.linalg.inv(A.T @ A)[1, 1]
    return coef[1], coef[0], var_b


def h(z, X, x):
    """Chance that one of ``z`` identical rows is missed by a sample of ``x`` from ``X``.

    Evaluated in 40-digit arithmetic so that large populations stay accurate.
    """
    with mp.workdps(40):
        z, X, x = mp.mpf(z), mp.mpf(X), mp.mpf(x)
        if X - x - z + 1 <= 0:
            return mp.mpf(0)
        return mp.exp(mp.loggamma(X - z + 1) + mp.loggamma(X - x + 1)
                      - mp.loggamma(X - x - z + 1) - mp.loggamma(X + 1))


def bisect_distinct(y, x, X, steps=200):
    """Root of ``Y (1 - h(X / Y)) = y`` on ``[y, X]`` by plain bisection."""

    def f(Y):
        with mp.workdps(40):
            return Y * (1 - h(mp.mpf(X) / Y, X, x)) - y

    lo, hi = float(y), float(X)
    if f(hi) <= 0:
        return hi
    for _ in range(steps):
        mid = (lo + hi) / 2
        if mid in (lo, hi):
            break
        if f(mid) > 0:
            hi = mid
        else:
            lo = mid
    return (lo + hi) / 2


def central_gradient(f, point, rel=1e-5):
    point = np.asarray(point, float)
    grad = np.zeros(len(point))
    for k in range(len(point)):
        step = rel * max(abs(point[k]), 1.0)
        up, down = point.copy(), point.copy()
        up[k] += step
        down[k] -= step
        grad[k] = (f(*up) - f(*down)) / (2 * step)
    return grad


def fd_variance(f, point, cov, rel=1e-5):
    g = central_gradient(f, point, rel)
    return float(g @ np.asarray(cov, float) @ g)


def triple_sum(J, S):
    J, S = np.asarray(J, float), np.asarray(S, float)
    m, n = J.shape
    out = np.zeros((m, m))
    for i in range(m):
        for j in range(m):
            total = 0.0
            for k in range(n):
                for l in range(n):
                    total += S[k, l] * J[i, k] * J[j, l]
            out[i, j] = total
    return out


def rel_err(a, b):
    return abs(a - b) / max(abs(b), 1e-300)
