"""Library-level simulations: threshold calibration, power, match probability.

Every outer iteration draws its randomness from ``(seed, k)`` so results do
not depend on how iterations are scheduled.
"""

from __future__ import annotations

import csv
import json
import math
import threading
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import _rng
from .inference import test_statistic
from .kernel import KernelSpec, kernel_scores, partition_from_values, score_objects
from .posterior import PosteriorError, PriorConfig
from .spectra import BSplineBasis, SourceLibrary, Spectrum, fit_spline_model, resample_spectra

DEFAULT_ALPHAS = (0.05, 0.10, 0.25, 0.50, 0.75, 0.90, 0.95)
#: fresh object sets tried when a test's posterior sampler aborts
MAX_REDRAWS = 5


class InsufficientReplicatesError(ValueError):
    pass


@dataclass(frozen=True)
class SupplyConfig:
    """How objects are drawn from a source.

    Sources with fewer replicates than requested fall back to pseudo-spectra
    from a B-spline coefficient model when ``resample`` is set.
    """

    resample: bool = True
    n_basis: int = 300
    order: int = 4


class ObjectSupply:
    def __init__(self, library: SourceLibrary, config: SupplyConfig = SupplyConfig()):
        self.library = library
        self.config = config
        self._models = {}
        self._lock = threading.Lock()
        self._values = {sid: library.values(sid) for sid in library.source_ids}

    def can_supply(self, source_id: str, count: int) -> bool:
        have = len(self._values[source_id])
        return have >= count or (self.config.resample and have >= 2)

    def model(self, source_id: str):
        with self._lock:
            if source_id not in self._models:
                grid = self.library.grid
                basis = BSplineBasis.clamped_uniform(grid[0], grid[-1], self.config.n_basis, self.config.order)
                self._models[source_id] = fit_spline_model(self.library[source_id], basis)
            return self._models[source_id]

    def draw(self, source_id: str, count: int, rng: np.random.Generator,
             force_resample: bool = False) -> np.ndarray:
        """``count`` distinct objects from one source as a ``count x grid`` array."""
        vals = self._values[source_id]
        if not force_resample and len(vals) >= count:
            return vals[rng.choice(len(vals), size=count, replace=False)]
        if not (self.config.resample or force_resample) or len(vals) < 2:
            raise InsufficientReplicatesError(
                f"source {source_id!r} has {len(vals)} replicates, {count} needed and resampling is off")
        pseudo = resample_spectra(self.model(source_id), count, int(rng.integers(2 ** 63)))
        return np.stack([sp.values for sp in pseudo])


def _eligible(supply: ObjectSupply, count: int) -> list[str]:
    ids = [sid for sid in supply.library.source_ids if supply.can_supply(sid, count)]
    if not ids:
        raise InsufficientReplicatesError(f"no source can furnish {count} objects")
    return ids


def _h(control: np.ndarray, trace: np.ndarray, kernel: KernelSpec, prior: PriorConfig,
       K_inner: int, seed) -> float:
    part = partition_from_values(control, trace, kernel)
    return test_statistic(part.s_m, part.s_n, len(control), len(trace), prior, K_inner, seed).h


def _h_redrawing(make_objects, kernel: KernelSpec, prior: PriorConfig, K_inner: int,
                 seed) -> tuple[float, int]:
    """``_h`` on ``make_objects(0)``; on a posterior abort retry with ``make_objects(1)``, ...

    A single control set can fit the score model so badly that the
    posterior sampler gives up.  Inside a simulation that set is replaced
    by a fresh draw from the same sources, and the number of replacements
    is reported alongside the statistic.
    """
    last = None
    for attempt in range(MAX_REDRAWS + 1):
        control, trace = make_objects(attempt)
        try:
            return _h(control, trace, kernel, prior, K_inner, seed), attempt
        except PosteriorError as exc:
            last = exc
    raise PosteriorError(f"posterior aborted on {MAX_REDRAWS + 1} object sets in a row: {last}")


# -- threshold calibration --------------------------------------------------

@dataclass(frozen=True, eq=False)
class CalibrationTable:
    alpha_levels: tuple
    c_values: tuple
    K_outer: int
    K_inner: int
    N: int
    M: int
    seed: object
    h_samples: np.ndarray
    sources: tuple = ()
    provenance: dict = field(default_factory=dict)

    def c_for(self, alpha: float) -> float:
        for a, c in zip(self.alpha_levels, self.c_values):
            if math.isclose(a, alpha, rel_tol=0, abs_tol=1e-12):
                return c
        raise KeyError(f"alpha {alpha} not calibrated; available {list(self.alpha_levels)}")

    def to_dict(self) -> dict:
        seed = list(self.seed) if isinstance(self.seed, tuple) else self.seed
        return {"alpha_levels": list(self.alpha_levels), "c_values": list(self.c_values),
                "K_outer": self.K_outer, "K_inner": self.K_inner, "N": self.N, "M": self.M,
                "seed": seed, "h_samples": [float(h) for h in self.h_samples],
                "sources": list(self.sources), "provenance": self.provenance}

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationTable":
        seed = tuple(d["seed"]) if isinstance(d["seed"], list) else d["seed"]
        return cls(tuple(d["alpha_levels"]), tuple(d["c_values"]), d["K_outer"], d["K_inner"],
                   d["N"], d["M"], seed, np.array(d["h_samples"]), tuple(d.get("sources", ())),
                   d.get("provenance", {}))

    @classmethod
    def load(cls, path) -> "CalibrationTable":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def alpha_label(a: float) -> str:
    return f"{a:.2f}" if round(a, 2) == a else repr(float(a))


def write_calibration_csv(tables: Sequence[CalibrationTable], path) -> None:
    """One row per (N, M) configuration, one column per alpha level."""
    alphas = tables[0].alpha_levels
    if any(t.alpha_levels != alphas for t in tables):
        raise ValueError("all tables must share the alpha grid")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha_level"] + [alpha_label(a) for a in alphas])
        for t in tables:
            w.writerow([f"c(alpha)_N={t.N}_M={t.M}"] + [repr(float(c)) for c in t.c_values])


def same_source_statistics(library: SourceLibrary, N: int, M: int, K_outer: int, K_inner: int,
                           seed, kernel: KernelSpec = KernelSpec(),
                           prior: PriorConfig = PriorConfig(),
                           supply: Optional[SupplyConfig | ObjectSupply] = None,
                           threads: int = 1) -> tuple[np.ndarray, list[str], np.ndarray]:
    """``K_outer`` statistics with traces and controls drawn from one source each time.

    Returns the statistics, the source of each, and the number of object
    redraws each needed (see ``MAX_REDRAWS``).
    """
    sup = supply if isinstance(supply, ObjectSupply) else ObjectSupply(library, supply or SupplyConfig())
    eligible = _eligible(sup, N + M)

    def one(k: int):
        rng = _rng.stream(seed, 0, k)
        sid = eligible[int(rng.integers(len(eligible)))]

        def objects(attempt: int):
            objs = sup.draw(sid, N + M, rng if attempt == 0 else _rng.stream(seed, 2, k, attempt))
            return objs[:N], objs[N:]

        h, redraws = _h_redrawing(objects, kernel, prior, K_inner, _rng.derive(seed, 1, k))
        return h, sid, redraws

    res = _rng.parallel_map(one, range(K_outer), threads)
    return (np.array([r[0] for r in res]), [r[1] for r in res],
            np.array([r[2] for r in res], dtype=np.int64))


def calibrate_c_alpha(library: SourceLibrary, N: int, M: int,
                      alpha_levels: Sequence[float] = DEFAULT_ALPHAS, K_outer: int = 2000,
                      K_inner: int = 1000, seed=0, kernel: KernelSpec = KernelSpec(),
                      prior: PriorConfig = PriorConfig(),
                      supply: Optional[SupplyConfig | ObjectSupply] = None,
                      threads: int = 1) -> CalibrationTable:
    """Threshold c(alpha) as the alpha-quantile of same-source statistics."""
    if K_outer < 500:
        raise ValueError(f"K_outer must be >= 500, got {K_outer}")
    alphas = tuple(float(a) for a in alpha_levels)
    if any(not 0 < a < 1 for a in alphas):
        raise ValueError("alpha levels must lie in (0, 1)")
    h, sources, redraws = same_source_statistics(library, N, M, K_outer, K_inner, seed, kernel,
                                                 prior, supply, threads)
    order = np.argsort(alphas, kind="stable")
    c = np.empty(len(alphas))
    c[order] = np.quantile(h, np.array(alphas)[order])
    return CalibrationTable(alphas, tuple(float(v) for v in c), K_outer, K_inner, N, M,
                            seed, h, tuple(sources), {"object_redraws": int(redraws.sum())})


# -- power -------------------------------------------------------------------

@dataclass(frozen=True)
class PowerPoint:
    dissimilarity: float
    h: float
    rejected: bool
    trace_source: str
    control_source: str
    redraws: int = 0


@dataclass(frozen=True, eq=False)
class PowerCurve:
    points: list
    c_alpha: float
    N: int
    M: int
    seed: object

    @property
    def dissimilarity(self) -> np.ndarray:
        return np.array([p.dissimilarity for p in self.points])

    @property
    def h(self) -> np.ndarray:
        return np.array([p.h for p in self.points])

    @property
    def rejected(self) -> np.ndarray:
        return np.array([p.rejected for p in self.points])

    def rejection_rate(self, lo: float = -math.inf, hi: float = math.inf) -> float:
        d = self.dissimilarity
        sel = (d >= lo) & (d < hi)
        return float(self.rejected[sel].mean()) if sel.any() else math.nan

    def binned(self, edges) -> list[tuple[float, float, int, float]]:
        """``(lo, hi, count, rejection rate)`` per bin; the last bin is closed."""
        d, r = self.dissimilarity, self.rejected
        out = []
        for b, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
            sel = (d >= lo) & ((d <= hi) if b == len(edges) - 2 else (d < hi))
            out.append((float(lo), float(hi), int(sel.sum()), float(r[sel].mean()) if sel.any() else math.nan))
        return out

    def to_csv(self, path) -> None:
        pts = sorted(self.points, key=lambda p: (p.dissimilarity, p.trace_source, p.control_source, p.h))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["dissimilarity", "h", "rejected", "trace_source", "control_source", "redraws"])
            for p in pts:
                w.writerow([repr(float(p.dissimilarity)), repr(float(p.h)), int(p.rejected),
                            p.trace_source, p.control_source, p.redraws])


def mean_spectra(library: SourceLibrary) -> dict[str, np.ndarray]:
    return {sid: library.values(sid).mean(axis=0) for sid in library.source_ids}


def power_curve(library: SourceLibrary, N: int, M: int, c_alpha: float, K: int, seed,
                K_inner: int = 1000, kernel: KernelSpec = KernelSpec(),
                prior: PriorConfig = PriorConfig(),
                supply: Optional[SupplyConfig | ObjectSupply] = None,
                threads: int = 1) -> PowerCurve:
    """Rejection indicators against the dissimilarity of source mean spectra.

    Trace and control sources are drawn uniformly with replacement and may
    coincide, in which case the two sets are disjoint draws from one source.
    """
    if len(library) < 2:
        raise ValueError("power needs at least 2 sources")
    if not 0 <= c_alpha <= 1:
        raise ValueError("c_alpha must lie in [0, 1]")
    sup = supply if isinstance(supply, ObjectSupply) else ObjectSupply(library, supply or SupplyConfig())
    ids = _eligible(sup, N + M)
    means = mean_spectra(library)
    diss_cache: dict[tuple[str, str], float] = {}
    lock = threading.Lock()

    def dissimilarity(a: str, b: str) -> float:
        key = (a, b) if a <= b else (b, a)
        with lock:
            if key not in diss_cache:
                diss_cache[key] = float(kernel_scores(means[key[0]], means[key[1]], kernel)[0])
            return diss_cache[key]

    def one(k: int) -> PowerPoint:
        rng = _rng.stream(seed, 0, k)
        i = ids[int(rng.integers(len(ids)))]
        j = ids[int(rng.integers(len(ids)))]

        def objects(attempt: int):
            r = rng if attempt == 0 else _rng.stream(seed, 2, k, attempt)
            if i == j:
                objs = sup.draw(i, N + M, r)
                return objs[:N], objs[N:]
            trace = sup.draw(i, M, r)
            return sup.draw(j, N, r), trace

        h, redraws = _h_redrawing(objects, kernel, prior, K_inner, _rng.derive(seed, 1, k))
        return PowerPoint(dissimilarity(i, j), h, h <= c_alpha, i, j, redraws)

    return PowerCurve(_rng.parallel_map(one, range(K), threads), c_alpha, N, M, seed)


# -- random match probability -----------------------------------------------

@dataclass(frozen=True)
class RmpEstimate:
    rmp: float
    n_indistinguishable: int
    n_sources: int
    per_source: dict
    trace_source_id: Optional[str]
    N: int
    M: int
    c_alpha: float
    seed: object

    def to_dict(self) -> dict:
        seed = list(self.seed) if isinstance(self.seed, tuple) else self.seed
        return {"rmp": self.rmp, "n_indistinguishable": self.n_indistinguishable,
                "n_sources": self.n_sources, "per_source": self.per_source,
                "trace_source_id": self.trace_source_id, "N": self.N, "M": self.M,
                "c_alpha": self.c_alpha, "seed": seed}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["source_id", "h", "indistinguishable", "redraws"])
            for sid, rec in self.per_source.items():
                w.writerow([sid, repr(float(rec["h"])), int(rec["indistinguishable"]),
                            rec.get("redraws", 0)])


def estimate_rmp(trace, library: SourceLibrary, excluded_source: Optional[str], N: int,
                 c_alpha: float, K_inner: int, seed, resample_controls: bool = False,
                 kernel: KernelSpec = KernelSpec(), prior: PriorConfig = PriorConfig(),
                 supply: Optional[SupplyConfig | ObjectSupply] = None,
                 threads: int = 1) -> RmpEstimate:
    """Fraction of population sources whose controls cannot be told apart from ``trace``.

    ``trace`` is a sequence of spectra or an ``M x grid`` array.  Every source
    except ``excluded_source`` furnishes ``N`` controls (pseudo-spectra when
    ``resample_controls`` is set) and is tested at ``c_alpha``.
    """
    if isinstance(trace, np.ndarray):
        trace_vals = np.atleast_2d(trace)
    else:
        trace_vals = np.stack([sp.values for sp in trace])
    if trace_vals.shape[1] != len(library.grid):
        raise ValueError("trace spectra are not on the library grid")
    sup = supply if isinstance(supply, ObjectSupply) else ObjectSupply(library, supply or SupplyConfig())
    population = [sid for sid in library.source_ids if sid != excluded_source]
    if not population:
        raise ValueError("no sources left after exclusion")
    for sid in population:
        if resample_controls and len(library[sid]) < 2:
            raise InsufficientReplicatesError(f"source {sid!r} cannot be resampled")
        if not resample_controls and not sup.can_supply(sid, N):
            raise InsufficientReplicatesError(f"source {sid!r} cannot furnish {N} controls")
    index = {sid: k for k, sid in enumerate(library.source_ids)}

    def one(sid: str):
        k = index[sid]

        def objects(attempt: int):
            r = _rng.stream(seed, 0, k) if attempt == 0 else _rng.stream(seed, 2, k, attempt)
            return sup.draw(sid, N, r, force_resample=resample_controls), trace_vals

        return _h_redrawing(objects, kernel, prior, K_inner, _rng.derive(seed, 1, k))

    res = _rng.parallel_map(one, population, threads)
    per_source = {sid: {"h": float(h), "indistinguishable": bool(h > c_alpha), "redraws": int(r)}
                  for sid, (h, r) in zip(population, res)}
    count = sum(r["indistinguishable"] for r in per_source.values())
    return RmpEstimate(count / len(population), count, len(population), per_source,
                       excluded_source, N, len(trace_vals), c_alpha, seed)


# -- score normality diagnostics ---------------------------------------------

def _axis_summary(x: np.ndarray, zero_tol: float) -> dict:
    sd = float(x.std(ddof=1)) if len(x) > 1 else 0.0
    if sd <= zero_tol:
        return {"mean": float(x.mean()), "sd": sd, "zero_variance": True, "skewness": None,
                "excess_kurtosis": None, "shapiro_w": None, "shapiro_p": None}
    out = {"mean": float(x.mean()), "sd": sd, "zero_variance": False,
           "skewness": float(stats.skew(x)), "excess_kurtosis": float(stats.kurtosis(x))}
    if len(x) >= 3:
        w, p = stats.shapiro(x)
        out.update(shapiro_w=float(w), shapiro_p=float(p))
    else:
        out.update(shapiro_w=None, shapiro_p=None)
    return out


def _pair_summary(Z: np.ndarray, flags: list[bool]) -> list[dict]:
    out = []
    for a in range(Z.shape[1]):
        for b in range(a + 1, Z.shape[1]):
            if flags[a] or flags[b]:
                out.append({"axes": [a, b], "pearson": None, "spearman": None})
                continue
            out.append({"axes": [a, b], "pearson": float(np.corrcoef(Z[:, a], Z[:, b])[0, 1]),
                        "spearman": float(stats.spearmanr(Z[:, a], Z[:, b])[0])})
    return out


def normality_from_scores(scores) -> dict:
    """Marginal and eigen-projected normality summaries for rows of score vectors."""
    S = np.asarray(scores, dtype=float)
    if S.ndim != 2 or S.shape[0] < 2:
        raise ValueError("need at least 2 score vectors")
    scale = max(float(np.abs(S).max()), 1.0)
    tol = 1e-12 * scale
    cov = np.atleast_2d(np.cov(S, rowvar=False))
    w, V = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1]
    w, V = w[order], V[:, order]
    Z = (S - S.mean(axis=0)) @ V
    original = [_axis_summary(S[:, a], tol) for a in range(S.shape[1])]
    projected = [_axis_summary(Z[:, a], tol) for a in range(S.shape[1])]
    return {
        "n_vectors": int(S.shape[0]),
        "dimension": int(S.shape[1]),
        "eigenvalues": [float(v) for v in w],
        "original": original,
        "projected": projected,
        "original_pairs": _pair_summary(S, [o["zero_variance"] for o in original]),
        "projected_pairs": _pair_summary(Z, [o["zero_variance"] for o in projected]),
    }


def group_score_vectors(library: SourceLibrary, kernel: KernelSpec = KernelSpec(),
                        group_size: int = 3) -> np.ndarray:
    """Two disjoint groups of replicates per source, scored within each group."""
    if group_size < 2:
        raise ValueError("group_size must be >= 2")
    short = [sid for sid in library.source_ids if len(library[sid]) < 2 * group_size]
    if short:
        raise InsufficientReplicatesError(
            f"{len(short)} source(s) have fewer than {2 * group_size} replicates, e.g. {short[0]!r}")
    vectors = []
    for sid in library.source_ids:
        vals = library.values(sid)
        for g in range(2):
            vectors.append(score_objects(vals[g * group_size:(g + 1) * group_size], kernel))
    return np.array(vectors)


def normality_diagnostics(library: SourceLibrary, kernel: KernelSpec = KernelSpec(),
                          group_size: int = 3) -> dict:
    report = normality_from_scores(group_score_vectors(library, kernel, group_size))
    report["group_size"] = group_size
    report["n_sources"] = len(library)
    return report
