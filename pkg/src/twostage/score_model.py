"""Linear random-effects model for within-source pairwise scores.

For ``N`` objects from one source the ``n = C(N, 2)`` pairwise scores are

    s_n = theta * 1_n + P a + e,   a ~ N(0, sigma2_a I_N),  e ~ N(0, sigma2_e I_n)

so that ``Cov(s_n) = sigma2_a P P^T + sigma2_e I_n``.  That covariance has
three distinct eigenvalues with parameter-free eigenspaces, which makes its
inverse, determinant and the Gaussian likelihood available in closed form.
Nothing in this module forms or factors the dense ``n x n`` covariance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations

import numpy as np


class ScoreModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelParams:
    theta: float
    sigma2_a: float
    sigma2_e: float

    def __post_init__(self):
        if not (math.isfinite(self.theta) and math.isfinite(self.sigma2_a) and math.isfinite(self.sigma2_e)):
            raise ScoreModelError(f"non-finite parameters: {self}")
        if self.sigma2_a < 0:
            raise ScoreModelError(f"sigma2_a must be >= 0, got {self.sigma2_a}")
        if self.sigma2_e <= 0:
            raise ScoreModelError(f"sigma2_e must be > 0, got {self.sigma2_e}")

    def to_dict(self) -> dict:
        return {"theta": self.theta, "sigma2_a": self.sigma2_a, "sigma2_e": self.sigma2_e}


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    entries: np.ndarray
    N: int

    @property
    def n(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True, eq=False)
class EigenStructure:
    lambda1: float
    lambda2: float
    lambda3: float
    multiplicities: tuple[int, int, int]
    projector_v1: np.ndarray
    projector_2: np.ndarray
    projector_3: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.lambda1 * self.projector_v1 + self.lambda2 * self.projector_2
                + self.lambda3 * self.projector_3)


@dataclass(frozen=True, eq=False)
class SumsOfSquares:
    ss_a: float
    ss_e: float
    s_bar: float
    s_bar_by_object: np.ndarray


@dataclass(frozen=True)
class AnovaFit:
    """Method-of-moments estimates; ``clipped`` is set when sigma2_a was negative."""

    theta: float
    sigma2_a: float
    sigma2_e: float
    ms_a: float
    ms_e: float
    clipped: bool

    @property
    def params(self) -> ModelParams:
        return ModelParams(self.theta, self.sigma2_a, self.sigma2_e)


def n_pairs(N: int) -> int:
    return N * (N - 1) // 2


def _check_N(N: int) -> None:
    if int(N) != N or N < 3:
        raise ScoreModelError(f"need N >= 3 objects, got {N}")


@lru_cache(maxsize=None)
def pair_list(N: int) -> tuple[tuple[int, int], ...]:
    """Pairs ``(i, j)``, ``i < j``, in lexicographic order."""
    return tuple(combinations(range(N), 2))


def _pair_design(N: int) -> np.ndarray:
    pairs = np.array(pair_list(N), dtype=np.intp).reshape(-1, 2)
    D = np.zeros((len(pairs), N))
    rows = np.arange(len(pairs))
    D[rows, pairs[:, 0]] = 1.0
    D[rows, pairs[:, 1]] = 1.0
    D.setflags(write=False)
    return D


@lru_cache(maxsize=64)
def _cached_design(N: int) -> np.ndarray:
    return _pair_design(N)


def design_matrix(N: int) -> DesignMatrix:
    _check_N(N)
    return DesignMatrix(entries=_cached_design(int(N)), N=int(N))


@lru_cache(maxsize=64)
def _between_factor(N: int) -> np.ndarray:
    # projector_2 = c * A A^T with A = P/(N-1) - 1_n 1_N^T / n
    n = n_pairs(N)
    P = _cached_design(N)
    A = P / (N - 1) - 1.0 / n
    A = A * math.sqrt((N - 1) ** 2 / (N - 2))
    A.setflags(write=False)
    return A


@lru_cache(maxsize=16)
def _dense_projectors(N: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = n_pairs(N)
    p1 = np.full((n, n), 1.0 / n)
    A = _between_factor(N)
    p2 = A @ A.T
    p3 = np.eye(n) - p1 - p2
    for p in (p1, p2, p3):
        p.setflags(write=False)
    return p1, p2, p3


def eigenvalues(sigma2_a, sigma2_e, N: int):
    """Return ``(lambda1, lambda2, lambda3)``; works elementwise on arrays."""
    lam1 = 2 * (N - 1) * sigma2_a + sigma2_e
    lam2 = (N - 2) * sigma2_a + sigma2_e
    lam3 = sigma2_e + 0 * sigma2_a
    return lam1, lam2, lam3


def eigen_structure(params: ModelParams, N: int) -> EigenStructure:
    _check_N(N)
    n = n_pairs(N)
    lam1, lam2, lam3 = eigenvalues(params.sigma2_a, params.sigma2_e, N)
    p1, p2, p3 = _dense_projectors(int(N))
    return EigenStructure(lam1, lam2, lam3, (1, N - 1, n - N), p1, p2, p3)


def _positive_eigenvalues(params: ModelParams, N: int) -> tuple[float, float, float]:
    lams = eigenvalues(params.sigma2_a, params.sigma2_e, N)
    if min(lams) <= 0:
        raise ScoreModelError(f"covariance has a nonpositive eigenvalue: {lams}")
    return lams


def log_det_sigma(params: ModelParams, N: int) -> float:
    _check_N(N)
    n = n_pairs(N)
    lam1, lam2, lam3 = _positive_eigenvalues(params, N)
    return math.log(lam1) + (N - 1) * math.log(lam2) + (n - N) * math.log(lam3)


def project(v: np.ndarray, N: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split ``v`` (length n, or n x k) into its three eigenspace components."""
    v = np.asarray(v, dtype=float)
    n = n_pairs(N)
    if v.shape[0] != n:
        raise ScoreModelError(f"expected leading dimension {n} for N={N}, got {v.shape[0]}")
    A = _between_factor(int(N))
    p1 = np.broadcast_to(v.mean(axis=0), v.shape)
    p2 = A @ (A.T @ v)
    p3 = v - p1 - p2
    return p1, p2, p3


def apply_sigma_inverse(params: ModelParams, N: int, v: np.ndarray) -> np.ndarray:
    """Return ``Sigma^{-1} v`` for the within-source covariance of ``N`` objects."""
    _check_N(N)
    lam1, lam2, lam3 = _positive_eigenvalues(params, N)
    p1, p2, p3 = project(v, N)
    return p1 / lam1 + p2 / lam2 + p3 / lam3


def apply_sigma(params: ModelParams, N: int, v: np.ndarray) -> np.ndarray:
    _check_N(N)
    lam1, lam2, lam3 = eigenvalues(params.sigma2_a, params.sigma2_e, N)
    p1, p2, p3 = project(v, N)
    return lam1 * p1 + lam2 * p2 + lam3 * p3


def _check_scores(s_n, N: int) -> np.ndarray:
    _check_N(N)
    s_n = np.asarray(s_n, dtype=float)
    if s_n.ndim != 1 or s_n.shape[0] != n_pairs(N):
        raise ScoreModelError(f"s_n must have length C({N},2) = {n_pairs(N)}, got shape {s_n.shape}")
    return s_n


def sums_of_squares(s_n, N: int) -> SumsOfSquares:
    s_n = _check_scores(s_n, N)
    P = _cached_design(int(N))
    s_bar = float(s_n.mean())
    by_object = (P.T @ s_n) / (N - 1)
    ss_a = (N - 1) ** 2 / (N - 2) * float(np.sum((by_object - s_bar) ** 2))
    total = float(np.sum((s_n - s_bar) ** 2))
    # rounding can push the difference a hair below zero
    ss_e = max(total - ss_a, 0.0)
    return SumsOfSquares(ss_a=ss_a, ss_e=ss_e, s_bar=s_bar, s_bar_by_object=by_object)


def log_likelihood(s_n, params: ModelParams, N: int) -> float:
    s_n = _check_scores(s_n, N)
    n = len(s_n)
    lam1, lam2, lam3 = _positive_eigenvalues(params, N)
    ss = sums_of_squares(s_n, N)
    m2 = (math.log(lam1) + (N - 1) * math.log(lam2) + (n - N) * math.log(lam3)
          + n * math.log(2 * math.pi)
          + n * (ss.s_bar - params.theta) ** 2 / lam1 + ss.ss_a / lam2 + ss.ss_e / lam3)
    return -0.5 * m2


def anova_estimates(s_n, N: int) -> AnovaFit:
    ss = sums_of_squares(s_n, N)
    n = n_pairs(N)
    ms_a = ss.ss_a / (N - 1)
    ms_e = ss.ss_e / (n - N)
    sigma2_a = (ms_a - ms_e) / (N - 2)
    clipped = sigma2_a < 0
    return AnovaFit(theta=ss.s_bar, sigma2_a=max(sigma2_a, 0.0), sigma2_e=ms_e,
                    ms_a=ms_a, ms_e=ms_e, clipped=bool(clipped))


def simulate_scores(params: ModelParams, N: int, size: int, rng: np.random.Generator,
                    n_objects_design: np.ndarray | None = None) -> np.ndarray:
    """Draw ``size`` score vectors from the model; rows are replicates.

    ``n_objects_design`` overrides the pair design (e.g. the N+M design used
    under the common-source hypothesis).
    """
    D = _cached_design(int(N)) if n_objects_design is None else n_objects_design
    a = rng.standard_normal((size, D.shape[1])) * math.sqrt(params.sigma2_a)
    e = rng.standard_normal((size, D.shape[0])) * math.sqrt(params.sigma2_e)
    return params.theta + a @ D.T + e
