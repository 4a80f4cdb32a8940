"""Independent reference implementations used only by the tests.

Everything here is written the slow, obvious way (dense matrices, explicit
loops, textbook recursions) and shares no code with the package beyond
plain data types.
"""

from __future__ import annotations

import math
from itertools import combinations

import numpy as np


# -- score model ---------------------------------------------------------------

def design(N: int) -> np.ndarray:
    rows = []
    for i, j in combinations(range(N), 2):
        r = np.zeros(N)
        r[i] = r[j] = 1.0
        rows.append(r)
    return np.array(rows)


def dense_sigma(sigma2_a: float, sigma2_e: float, N: int) -> np.ndarray:
    P = design(N)
    return sigma2_a * P @ P.T + sigma2_e * np.eye(len(P))


def mvn_logpdf(x, mean, cov) -> float:
    x = np.asarray(x, float) - mean
    sign, logdet = np.linalg.slogdet(cov)
    assert sign > 0
    quad = x @ np.linalg.solve(cov, x)
    return -0.5 * (len(x) * math.log(2 * math.pi) + logdet + quad)


def brute_sums_of_squares(s, N: int):
    """ANOVA quantities by direct loops: per-object means, SS_a and SS_e via the quadratic form."""
    pairs = list(combinations(range(N), 2))
    s = np.asarray(s, float)
    s_bar = s.mean()
    by_obj = []
    for i in range(N):
        by_obj.append(np.mean([s[k] for k, (a, b) in enumerate(pairs) if i in (a, b)]))
    by_obj = np.array(by_obj)
    ss_a = (N - 1) ** 2 / (N - 2) * np.sum((by_obj - s_bar) ** 2)
    n = len(s)
    centred = s @ (np.eye(n) - np.ones((n, n)) / n) @ s
    return ss_a, centred - ss_a, s_bar, by_obj


# -- conditional Gaussian --------------------------------------------------------

def dense_conditional(s_n, theta, sigma2_a, sigma2_e, N: int, M: int):
    """Condition the full (N+M)-object score vector on its control-only block."""
    pairs = list(combinations(range(N + M), 2))
    Q = design(N + M)
    full = sigma2_a * Q @ Q.T + sigma2_e * np.eye(len(pairs))
    ctrl = [k for k, (i, j) in enumerate(pairs) if j < N]
    trace = [k for k, (i, j) in enumerate(pairs) if j >= N]
    S_mm = full[np.ix_(trace, trace)]
    S_mn = full[np.ix_(trace, ctrl)]
    S_nn = full[np.ix_(ctrl, ctrl)]
    K = S_mn @ np.linalg.inv(S_nn)
    mu = theta + K @ (np.asarray(s_n) - theta)
    cov = S_mm - K @ S_mn.T
    return mu, cov


# -- B-splines -----------------------------------------------------------------

def cox_de_boor(knots, order: int, i: int, x: float) -> float:
    """B_{i,order}(x) by the Cox-de Boor recursion (order = degree + 1).

    Intervals are half open except that the last non-degenerate one is
    closed, so a clamped basis forms a partition of unity on the whole span.
    """
    t = knots
    if order == 1:
        last = max(k for k in range(len(t) - 1) if t[k] < t[k + 1])
        if t[i] <= x < t[i + 1]:
            return 1.0
        return 1.0 if (i == last and x == t[i + 1]) else 0.0
    out = 0.0
    d1 = t[i + order - 1] - t[i]
    if d1 > 0:
        out += (x - t[i]) / d1 * cox_de_boor(t, order - 1, i, x)
    d2 = t[i + order] - t[i + 1]
    if d2 > 0:
        out += (t[i + order] - x) / d2 * cox_de_boor(t, order - 1, i + 1, x)
    return out


# -- kernel --------------------------------------------------------------------

def direct_norm_term(x, y, mask) -> float:
    d = (np.asarray(x) - np.asarray(y))[mask]
    return math.sqrt(float(np.sum(d * d)) / mask.sum())


def direct_lagged_correlations(x, y, mask, max_lag: int) -> dict[int, float]:
    """Pearson correlation of x[t] with y[t+lag] over t with both points kept."""
    G = len(x)
    out = {}
    for lag in range(-max_lag, max_lag + 1):
        t = np.arange(max(0, -lag), min(G, G - lag))
        keep = mask[t] & mask[t + lag]
        a, b = x[t[keep]], y[t[keep] + lag]
        out[lag] = float(np.corrcoef(a, b)[0, 1])
    return out


def direct_kernel(x, y, mask, max_lag: int = 10, w_corr: float = 1.0, w_norm: float = 1.0) -> float:
    corr = max(direct_lagged_correlations(x, y, mask, max_lag).values())
    return w_corr * (1 - min(corr, 1.0)) + w_norm * direct_norm_term(x, y, mask)


def direct_low_signal_mask(x, y, threshold: float, min_run: int) -> np.ndarray:
    """Drop points inside runs of more than ``min_run`` consecutive jointly-low points."""
    low = (np.abs(x) <= threshold * np.abs(x).max()) & (np.abs(y) <= threshold * np.abs(y).max())
    keep = np.ones(len(x), bool)
    start = None
    for t in range(len(x) + 1):
        if t < len(x) and low[t]:
            start = t if start is None else start
        else:
            if start is not None and t - start > min_run:
                keep[start:t] = False
            start = None
    return keep


def brute_pair_scores(objects, score):
    return np.array([score(objects[i], objects[j]) for i, j in combinations(range(len(objects)), 2)])
