"""Conditional score distribution and the Monte Carlo common-source statistic.

Objects are indexed with the ``N`` controls first (``0..N-1``) and the ``M``
traces after them.  Pairs are enumerated lexicographically; those with both
members below ``N`` form ``s_n`` and the rest form ``s_m``.  Under the
common-source hypothesis the full vector has covariance
``sigma2_a Q Q^T + sigma2_e I`` with ``Q`` the pair design over ``N + M``
objects, and ``s_m | s_n`` is Gaussian.

The statistic ``h`` estimates the posterior-averaged probability that a
fresh conditional draw is no more likely than the observed ``s_m``; small
values indicate the traces do not fit the control source.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular

from . import _rng
from .posterior import PriorConfig, draw_posterior
from .score_model import (ModelParams, _pair_design, apply_sigma_inverse, n_pairs, pair_list,
                          project, _check_scores)

LOG_2PI = math.log(2 * math.pi)
JITTER_STEPS = 3


class ConditionalCovarianceError(ArithmeticError):
    pass


class Decision(str, enum.Enum):
    REJECT = "reject_H1"
    FAIL_TO_REJECT = "fail_to_reject_H1"


@dataclass(frozen=True, eq=False)
class ConditionalMoments:
    mu_cond: np.ndarray
    cov_cond: np.ndarray
    factor: np.ndarray

    @property
    def m(self) -> int:
        return len(self.mu_cond)


@dataclass(frozen=True)
class TestOutcome:
    h: float
    mc_std_err: float
    K: int
    N: int
    M: int
    seed: object = None
    decision: Optional[Decision] = None
    c_alpha_used: Optional[float] = None

    __test__ = False  # not a pytest class

    def with_decision(self, c_alpha: float) -> "TestOutcome":
        return TestOutcome(self.h, self.mc_std_err, self.K, self.N, self.M, self.seed,
                           decide(self.h, c_alpha), c_alpha)

    def to_dict(self) -> dict:
        seed = list(self.seed) if isinstance(self.seed, tuple) else self.seed
        return {"h": self.h, "mc_std_err": self.mc_std_err, "K": self.K,
                "decision": None if self.decision is None else self.decision.value,
                "c_alpha": self.c_alpha_used, "seed": seed, "N": self.N, "M": self.M}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass(frozen=True, eq=False)
class _Structure:
    """Parameter-free products for a fixed (N, M)."""

    N: int
    M: int
    trace_rows: np.ndarray
    control_rows: np.ndarray
    QmQmT: np.ndarray
    C: np.ndarray            # Q_m Q_n^T, so Sigma_mn = sigma2_a C
    C1: np.ndarray           # C 1_n
    G: tuple                 # C Pi_k C^T for the three eigenspaces


@lru_cache(maxsize=32)
def structure(N: int, M: int) -> _Structure:
    if N < 3 or M < 1:
        raise ValueError(f"need N >= 3 and M >= 1, got N={N}, M={M}")
    pairs = np.array(pair_list(N + M))
    is_control = pairs[:, 1] < N
    Q = _pair_design(N + M)
    Qm, Qn = Q[~is_control], Q[is_control]
    C = Qm @ Qn.T
    G = tuple(C @ p for p in project(C.T, N))
    out = _Structure(N, M, np.flatnonzero(~is_control), np.flatnonzero(is_control),
                     Qm @ Qm.T, C, C.sum(axis=1), G)
    for arr in (out.trace_rows, out.control_rows, out.QmQmT, out.C, out.C1, *out.G):
        arr.setflags(write=False)
    return out


def n_trace_pairs(N: int, M: int) -> int:
    return n_pairs(N + M) - n_pairs(N)


def split_scores(s_full, N: int, M: int) -> tuple[np.ndarray, np.ndarray]:
    """Split a lexicographically ordered score vector over N+M objects into (s_m, s_n)."""
    st = structure(N, M)
    s_full = np.asarray(s_full, dtype=float)
    return s_full[..., st.trace_rows], s_full[..., st.control_rows]


def simulate_common_source(params: ModelParams, N: int, M: int, rng: np.random.Generator,
                           size: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Draw (s_m, s_n) with all N+M objects from one source; rows are replicates."""
    Q = _pair_design(N + M)
    a = rng.standard_normal((size, N + M)) * math.sqrt(params.sigma2_a)
    e = rng.standard_normal((size, Q.shape[0])) * math.sqrt(params.sigma2_e)
    return split_scores(params.theta + a @ Q.T + e, N, M)


def _factor(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cov = 0.5 * (cov + cov.T)
    m = cov.shape[0]
    base = 1e-12 * np.trace(cov) / m
    for step in range(JITTER_STEPS + 2):
        jitter = 0.0 if step == 0 else base * 10.0 ** (step - 1)
        try:
            return cov, np.linalg.cholesky(cov + jitter * np.eye(m))
        except np.linalg.LinAlgError:
            continue
    smallest = float(np.linalg.eigvalsh(cov)[0])
    raise ConditionalCovarianceError(
        f"conditional covariance is not positive definite (smallest eigenvalue {smallest:.6g})")


def conditional_moments(s_n, params: ModelParams, N: int, M: int) -> ConditionalMoments:
    s_n = _check_scores(s_n, N)
    st = structure(N, M)
    m = st.C.shape[0]
    sa, se = params.sigma2_a, params.sigma2_e
    mu = params.theta + sa * (st.C @ apply_sigma_inverse(params, N, s_n - params.theta))
    cov = sa * st.QmQmT + se * np.eye(m) - sa ** 2 * (st.C @ apply_sigma_inverse(params, N, st.C.T))
    cov, L = _factor(cov)
    return ConditionalMoments(mu, cov, L)


def sample_sm_star(moments: ConditionalMoments, rng: np.random.Generator, size=None) -> np.ndarray:
    if size is None:
        return moments.mu_cond + moments.factor @ rng.standard_normal(moments.m)
    z = rng.standard_normal((size, moments.m))
    return moments.mu_cond + z @ moments.factor.T


def conditional_log_likelihood(s_m, moments: ConditionalMoments) -> np.ndarray:
    """Gaussian log-density of ``s_m`` (length m, or rows of a k x m array)."""
    s_m = np.asarray(s_m, dtype=float)
    diag = np.diag(moments.factor)
    if s_m.shape[-1] != moments.m:
        raise ValueError(f"s_m must have length {moments.m}, got {s_m.shape[-1]}")
    if np.any(diag <= 0) or not np.all(np.isfinite(diag)):
        raise ConditionalCovarianceError("degenerate triangular factor")
    r = (s_m - moments.mu_cond).T
    z = solve_triangular(moments.factor, r, lower=True)
    quad = np.sum(z * z, axis=0)
    out = -0.5 * (moments.m * LOG_2PI + quad) - np.sum(np.log(diag))
    return out if s_m.ndim > 1 else float(out)


def _batched_moments(s_n: np.ndarray, theta, sigma2_a, sigma2_e, N: int, M: int):
    """Conditional means (K x m) and factors (K x m x m) for K parameter draws."""
    st = structure(N, M)
    m = st.C.shape[0]
    lam1 = 2 * (N - 1) * sigma2_a + sigma2_e
    lam2 = (N - 2) * sigma2_a + sigma2_e
    lam3 = sigma2_e
    c1, c2, c3 = (st.C @ p for p in project(s_n, N))
    mu = (theta[:, None]
          + sigma2_a[:, None] * ((c1[None, :] - theta[:, None] * st.C1[None, :]) / lam1[:, None]
                                 + c2[None, :] / lam2[:, None] + c3[None, :] / lam3[:, None]))
    # cov_k = sum_j coef[k, j] * B_j over five fixed m x m matrices
    basis = np.stack([st.QmQmT, np.eye(m), *st.G]).reshape(5, m * m)
    coef = np.stack([sigma2_a, sigma2_e, -sigma2_a ** 2 / lam1, -sigma2_a ** 2 / lam2,
                     -sigma2_a ** 2 / lam3], axis=1)
    cov = (coef @ basis).reshape(-1, m, m)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        L = np.stack([_factor(c)[1] for c in cov])
    return mu, L


def _batched_loglik(x: np.ndarray, mu: np.ndarray, L: np.ndarray) -> np.ndarray:
    m = mu.shape[1]
    z = np.linalg.solve(L, (x - mu)[..., None])[..., 0]
    logdet_half = np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
    return -0.5 * (m * LOG_2PI + np.sum(z * z, axis=1)) - logdet_half


def test_statistic(s_m, s_n, N: int, M: int, prior: Optional[PriorConfig] = None, K: int = 1000,
                   seed=0, params: Optional[ModelParams] = None) -> TestOutcome:
    """Monte Carlo estimate of the posterior-integrated common-source statistic.

    For each of K posterior draws of the model parameters, compare the
    conditional likelihood of the observed ``s_m`` with that of a fresh draw
    from the conditional distribution, and average the indicator
    ``L(s_m) >= L(s_m*)``.

    ``params`` fixes the parameters for every iteration instead of sampling
    them from the posterior; this is a validation hook.
    """
    if K < 100:
        raise ValueError(f"K must be >= 100, got {K}")
    s_n = _check_scores(s_n, N)
    s_m = np.asarray(s_m, dtype=float)
    if s_m.shape != (n_trace_pairs(N, M),):
        raise ValueError(f"s_m must have length {n_trace_pairs(N, M)}, got shape {s_m.shape}")
    z_rng = _rng.stream(seed, 1)

    if params is not None:
        mom = conditional_moments(s_n, params, N, M)
        star = sample_sm_star(mom, z_rng, size=K)
        observed = conditional_log_likelihood(s_m, mom)
        simulated = conditional_log_likelihood(star, mom)
    else:
        post = draw_posterior(s_n, N, prior or PriorConfig(), K, _rng.stream(seed, 0))
        mu, L = _batched_moments(s_n, post.theta, post.sigma2_a, post.sigma2_e, N, M)
        z = z_rng.standard_normal((K, mu.shape[1]))
        # s* = mu + L z, so its whitened residual is z itself
        observed = _batched_loglik(np.broadcast_to(s_m, mu.shape), mu, L)
        logdet_half = np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
        simulated = -0.5 * (mu.shape[1] * LOG_2PI + np.sum(z * z, axis=1)) - logdet_half

    hits = int(np.count_nonzero(observed >= simulated))
    h = hits / K
    return TestOutcome(h=h, mc_std_err=math.sqrt(h * (1 - h) / K), K=K, N=N, M=M,
                       seed=_rng.as_key(seed) if not isinstance(seed, int) else seed)


def decide(h: float, c_alpha: float) -> Decision:
    if not (0 <= h <= 1 and 0 <= c_alpha <= 1):
        raise ValueError(f"h and c_alpha must lie in [0, 1], got h={h}, c_alpha={c_alpha}")
    return Decision.REJECT if h <= c_alpha else Decision.FAIL_TO_REJECT
