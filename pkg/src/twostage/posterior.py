"""Direct i.i.d. sampling of (theta, sigma2_a, sigma2_e) given control scores.

The two sums of squares are independent with

    SS_a / eta_a ~ chi2(N - 1),   SS_e / eta_e ~ chi2(n - N),
    eta_a = (N - 2) sigma2_a + sigma2_e,   eta_e = sigma2_e,

so conjugate Inverse-Gamma priors on (eta_a, eta_e) give independent
Inverse-Gamma posteriors.  Draws with ``eta_a < eta_e`` would imply a
negative random-effect variance; they are redrawn and counted.  ``theta``
is then Normal given the variances.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from . import _rng
from .score_model import n_pairs, sums_of_squares, _check_scores

#: below this acceptance fraction (after ``REJECTION_WINDOW`` attempts) sampling aborts
MIN_ACCEPTANCE = 0.01
REJECTION_WINDOW = 1000


class PosteriorError(RuntimeError):
    pass


@dataclass(frozen=True)
class PriorConfig:
    """Inverse-Gamma priors on (eta_a, eta_e) and a Normal prior on theta.

    Fields left as ``None`` are filled from the control scores by
    :meth:`resolve`, which keeps the test invariant to the units of the
    kernel: each scale defaults to ``0.001 * var(s_n)``, ``mu0`` to the mean
    and ``lambda2`` to ``10 * var(s_n)``.
    """

    alpha_a: float = 0.001
    beta_a: Optional[float] = None
    alpha_e: float = 0.001
    beta_e: Optional[float] = None
    mu0: Optional[float] = None
    lambda2: Optional[float] = None

    def __post_init__(self):
        for name in ("alpha_a", "beta_a", "alpha_e", "beta_e"):
            v = getattr(self, name)
            if v is None and name.startswith("beta"):
                continue
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive, got {v}")
        if self.lambda2 is not None and not self.lambda2 > 0:
            raise ValueError(f"lambda2 must be positive, got {self.lambda2}")

    def resolve(self, s_n) -> "PriorConfig":
        s_n = np.asarray(s_n, dtype=float)
        mean = float(s_n.mean())
        var = float(s_n.var(ddof=1)) if s_n.size > 1 else 0.0
        var = max(var, 1e-12 * max(1.0, mean * mean))
        return replace(
            self,
            beta_a=0.001 * var if self.beta_a is None else self.beta_a,
            beta_e=0.001 * var if self.beta_e is None else self.beta_e,
            mu0=mean if self.mu0 is None else self.mu0,
            lambda2=10.0 * var if self.lambda2 is None else self.lambda2,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PriorConfig":
        return cls(**d)


@dataclass(frozen=True)
class PosteriorDraw:
    theta: float
    sigma2_a: float
    sigma2_e: float
    eta_a: float
    eta_e: float
    rejected_count: int


@dataclass(frozen=True, eq=False)
class PosteriorSample:
    """K posterior draws held column-wise."""

    theta: np.ndarray
    sigma2_a: np.ndarray
    sigma2_e: np.ndarray
    eta_a: np.ndarray
    eta_e: np.ndarray
    rejected_count: np.ndarray

    def __len__(self) -> int:
        return len(self.theta)

    def draws(self) -> list[PosteriorDraw]:
        return [PosteriorDraw(float(t), float(a), float(e), float(ea), float(ee), int(r))
                for t, a, e, ea, ee, r in zip(self.theta, self.sigma2_a, self.sigma2_e,
                                              self.eta_a, self.eta_e, self.rejected_count)]


def posterior_shapes(ss_a: float, ss_e: float, N: int, n: int, prior: PriorConfig):
    """Inverse-Gamma (shape, scale) pairs for eta_a and eta_e."""
    if prior.beta_a is None or prior.beta_e is None:
        raise ValueError("prior scales unresolved; call PriorConfig.resolve(s_n) first")
    return ((prior.alpha_a + (N - 1) / 2, ss_a / 2 + prior.beta_a),
            (prior.alpha_e + (n - N) / 2, ss_e / 2 + prior.beta_e))


def sample_eta(ss_a: float, ss_e: float, N: int, n: int, prior: PriorConfig,
               rng: np.random.Generator, size=None):
    if ss_a < 0 or ss_e < 0:
        raise ValueError("sums of squares must be nonnegative")
    (sh_a, sc_a), (sh_e, sc_e) = posterior_shapes(ss_a, ss_e, N, n, prior)
    eta_a = sc_a / rng.gamma(sh_a, size=size)
    eta_e = sc_e / rng.gamma(sh_e, size=size)
    return eta_a, eta_e


def eta_to_sigma(eta_a: float, eta_e: float, N: int):
    """Invert the reparameterisation; ``None`` when sigma2_a would be negative."""
    sigma2_a = (eta_a - eta_e) / (N - 2)
    if sigma2_a < 0:
        return None
    return sigma2_a, eta_e


def theta_posterior(s_bar, n: int, sigma2_a, sigma2_e, N: int, prior: PriorConfig):
    """Posterior mean and variance of theta.

    With v1 proportional to 1_n, ``1' Sigma^-1 1 = n / lambda1`` and
    ``1' Sigma^-1 s = n s_bar / lambda1``.
    """
    if prior.mu0 is None or prior.lambda2 is None:
        raise ValueError("prior must be resolved (mu0, lambda2) before sampling theta")
    lam1 = 2 * (N - 1) * sigma2_a + sigma2_e
    precision_data = n / lam1
    denom = precision_data * prior.lambda2 + 1.0
    mu_p = (precision_data * s_bar * prior.lambda2 + prior.mu0) / denom
    var_p = prior.lambda2 / denom
    return mu_p, var_p


def sample_theta(s_bar, n: int, sigma2_a, sigma2_e, N: int, prior: PriorConfig,
                 rng: np.random.Generator):
    mu_p, var_p = theta_posterior(s_bar, n, sigma2_a, sigma2_e, N, prior)
    z = rng.standard_normal(np.shape(mu_p) or None)
    return mu_p + np.sqrt(var_p) * z


def draw_posterior(s_n, N: int, prior: PriorConfig, K: int,
                   rng: np.random.Generator) -> PosteriorSample:
    """Vectorised sampler behind :func:`sample_posterior`."""
    if K < 1:
        raise ValueError("K must be >= 1")
    s_n = _check_scores(s_n, N)
    n = n_pairs(N)
    if n <= N:
        # with N = 3 every control score is explained by the three object effects
        raise ValueError(f"N={N} controls give n - N = {n - N} degrees of freedom for the lack-of-fit "
                         "variance; posterior sampling needs N >= 4 (or pass known parameters)")
    prior = prior.resolve(s_n)
    ss = sums_of_squares(s_n, N)

    eta_a = np.empty(K)
    eta_e = np.empty(K)
    rejected = np.zeros(K, dtype=np.int64)
    pending = np.arange(K)
    attempts = accepted = 0
    while pending.size:
        ea, ee = sample_eta(ss.ss_a, ss.ss_e, N, n, prior, rng, size=pending.size)
        ok = ea >= ee
        eta_a[pending[ok]] = ea[ok]
        eta_e[pending[ok]] = ee[ok]
        rejected[pending[~ok]] += 1
        attempts += pending.size
        accepted += int(ok.sum())
        pending = pending[~ok]
        if attempts >= REJECTION_WINDOW and accepted < MIN_ACCEPTANCE * attempts:
            raise PosteriorError(
                f"posterior rejection rate {1 - accepted / attempts:.4f} over {attempts} draws "
                f"(SS_a={ss.ss_a:.6g}, SS_e={ss.ss_e:.6g}); the control scores fit the model poorly")
    sigma2_a = (eta_a - eta_e) / (N - 2)
    sigma2_e = eta_e
    theta = sample_theta(ss.s_bar, n, sigma2_a, sigma2_e, N, prior, rng)
    return PosteriorSample(np.atleast_1d(theta), sigma2_a, sigma2_e, eta_a, eta_e, rejected)


def sample_posterior(s_n, N: int, prior: PriorConfig, K: int, seed) -> list[PosteriorDraw]:
    return draw_posterior(s_n, N, prior, K, _rng.stream(seed)).draws()
