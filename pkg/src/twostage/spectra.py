"""Spectra, spectral libraries, B-spline source models and synthetic sources."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.interpolate import BSpline
from scipy.linalg import solve_triangular

from . import _rng

LONG_HEADER = ["source_id", "replicate_id", "wavenumber", "absorbance"]
FORMATS = ("long-csv", "wide-csv")


class ParseError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


class RankDeficientBasisError(ValueError):
    pass


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


@dataclass(frozen=True, eq=False)
class Spectrum:
    grid: np.ndarray
    values: np.ndarray
    source_id: str = ""
    replicate_id: str = ""

    def __post_init__(self):
        grid = np.array(self.grid, dtype=float)
        values = np.array(self.values, dtype=float)
        if grid.ndim != 1 or grid.shape != values.shape:
            raise ValueError(f"grid and values must be 1-D of equal length, got {grid.shape} and {values.shape}")
        if len(grid) < 2:
            raise ValueError("a spectrum needs at least 2 points")
        if not np.all(np.diff(grid) > 0):
            raise ValueError("grid must be strictly increasing")
        if not (np.all(np.isfinite(values)) and np.all(np.isfinite(grid))):
            raise ValueError("spectrum contains non-finite values")
        grid.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(eq=False)
class SourceLibrary:
    """Spectra grouped by source, all on one shared grid."""

    sources: dict[str, list[Spectrum]]
    grid: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        if not self.sources:
            raise ValueError("no spectra")
        for sid, reps in self.sources.items():
            if not reps:
                raise ValueError(f"source {sid!r} has no replicates")
            for sp in reps:
                if sp.grid.shape != self.grid.shape or not np.array_equal(sp.grid, self.grid):
                    raise ValueError(f"spectrum {sid}:{sp.replicate_id} is not on the library grid")

    @property
    def source_ids(self) -> list[str]:
        return list(self.sources)

    def __len__(self) -> int:
        return len(self.sources)

    def __getitem__(self, source_id: str) -> list[Spectrum]:
        return self.sources[source_id]

    @property
    def n_spectra(self) -> int:
        return sum(len(v) for v in self.sources.values())

    def values(self, source_id: str) -> np.ndarray:
        return np.stack([sp.values for sp in self.sources[source_id]])

    def mean_spectrum(self, source_id: str) -> Spectrum:
        return Spectrum(self.grid, self.values(source_id).mean(axis=0), source_id, "mean")

    def merged(self, other: "SourceLibrary") -> "SourceLibrary":
        clash = set(self.sources) & set(other.sources)
        if clash:
            raise ValueError(f"duplicate source ids: {sorted(clash)}")
        return SourceLibrary({**self.sources, **other.sources}, self.grid)

    def renamed(self, prefix: str) -> "SourceLibrary":
        return SourceLibrary(
            {prefix + sid: [Spectrum(sp.grid, sp.values, prefix + sid, sp.replicate_id) for sp in reps]
             for sid, reps in self.sources.items()}, self.grid)

    def summary(self) -> dict:
        return {
            "n_sources": len(self.sources),
            "n_spectra": self.n_spectra,
            "replicates": {sid: len(reps) for sid, reps in self.sources.items()},
            "grid_points": int(len(self.grid)),
            "grid_min": float(self.grid[0]),
            "grid_max": float(self.grid[-1]),
        }


def library_from_spectra(spectra: Iterable[Spectrum]) -> SourceLibrary:
    sources: dict[str, list[Spectrum]] = {}
    grid = None
    for sp in spectra:
        grid = sp.grid if grid is None else grid
        sources.setdefault(sp.source_id, []).append(sp)
    if grid is None:
        raise ValueError("no spectra")
    return SourceLibrary(sources, grid)


# -- file formats -----------------------------------------------------------

def _parse_float(text: str, what: str, line: int) -> float:
    try:
        x = float(text)
    except ValueError:
        raise ParseError(f"cannot parse {what} {text!r}", line) from None
    if not math.isfinite(x):
        raise ParseError(f"non-finite {what} {text!r}", line)
    return x


def _load_long(rows: list[list[str]]) -> SourceLibrary:
    if rows[0] != LONG_HEADER:
        raise ParseError(f"expected header {','.join(LONG_HEADER)}, got {','.join(rows[0])}", 1)
    blocks: dict[tuple[str, str], tuple[list[float], list[float], int]] = {}
    current = None
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4:
            raise ParseError(f"expected 4 fields, got {len(row)}", lineno)
        key = (row[0], row[1])
        wn = _parse_float(row[2], "wavenumber", lineno)
        ab = _parse_float(row[3], "absorbance", lineno)
        if key != current:
            if key in blocks:
                raise ParseError(f"duplicate spectrum {key[0]}:{key[1]}", lineno)
            blocks[key] = ([], [], lineno)
            current = key
        grid, vals, _ = blocks[key]
        if grid and wn <= grid[-1]:
            raise ParseError("wavenumbers must be strictly increasing within a spectrum", lineno)
        grid.append(wn)
        vals.append(ab)
    if not blocks:
        raise ParseError("no spectra")
    ref = None
    spectra = []
    for (sid, rid), (grid, vals, lineno) in blocks.items():
        g = np.array(grid)
        if ref is None:
            ref = g
        elif g.shape != ref.shape or not np.array_equal(g, ref):
            raise ParseError(f"grid of spectrum {sid}:{rid} differs from the first spectrum", lineno)
        try:
            spectra.append(Spectrum(ref, np.array(vals), sid, rid))
        except ValueError as exc:
            raise ParseError(f"spectrum {sid}:{rid}: {exc}", lineno) from None
    return library_from_spectra(spectra)


def _load_wide(rows: list[list[str]]) -> SourceLibrary:
    header = rows[0]
    if not header or header[0] != "wavenumber":
        raise ParseError("expected first column 'wavenumber'", 1)
    labels = header[1:]
    if not labels:
        raise ParseError("no spectra")
    keys = []
    for lab in labels:
        sid, sep, rid = lab.rpartition(":")
        if not sep or not sid:
            raise ParseError(f"column {lab!r} is not of the form source:replicate", 1)
        keys.append((sid, rid))
    if len(set(keys)) != len(keys):
        raise ParseError("duplicate spectrum columns", 1)
    grid, cols = [], [[] for _ in labels]
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", lineno)
        wn = _parse_float(row[0], "wavenumber", lineno)
        if grid and wn <= grid[-1]:
            raise ParseError("wavenumbers must be strictly increasing", lineno)
        grid.append(wn)
        for c, text in zip(cols, row[1:]):
            c.append(_parse_float(text, "absorbance", lineno))
    if len(grid) < 2:
        raise ParseError("no spectra")
    g = np.array(grid)
    return library_from_spectra(Spectrum(g, np.array(c), sid, rid) for (sid, rid), c in zip(keys, cols))


def load_library(path, format: str = "long-csv") -> SourceLibrary:
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("no spectra")
    return _load_long(rows) if format == "long-csv" else _load_wide(rows)


def write_library(library: SourceLibrary, path, format: str = "long-csv") -> None:
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    spectra = [sp for reps in library.sources.values() for sp in reps]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if format == "long-csv":
            w.writerow(LONG_HEADER)
            for sp in spectra:
                for x, y in zip(sp.grid, sp.values):
                    w.writerow([sp.source_id, sp.replicate_id, _fmt(x), _fmt(y)])
        else:
            for sp in spectra:
                if ":" in sp.replicate_id:
                    raise ValueError(f"replicate id {sp.replicate_id!r} contains ':'")
            w.writerow(["wavenumber"] + [f"{sp.source_id}:{sp.replicate_id}" for sp in spectra])
            for i, x in enumerate(library.grid):
                w.writerow([_fmt(x)] + [_fmt(sp.values[i]) for sp in spectra])


# -- B-spline source models -------------------------------------------------

@dataclass(frozen=True, eq=False)
class BSplineBasis:
    """B-spline basis of the given order (degree + 1) on a knot vector."""

    order: int
    knots: np.ndarray

    def __post_init__(self):
        knots = np.array(self.knots, dtype=float)
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if np.any(np.diff(knots) < 0):
            raise ValueError("knots must be nondecreasing")
        if len(knots) < 2 * self.order:
            raise ValueError("too few knots for the requested order")
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)

    @property
    def n_basis(self) -> int:
        return len(self.knots) - self.order

    @property
    def span(self) -> tuple[float, float]:
        return float(self.knots[self.order - 1]), float(self.knots[self.n_basis])

    @classmethod
    def clamped_uniform(cls, lo: float, hi: float, n_basis: int = 300, order: int = 4) -> "BSplineBasis":
        if n_basis < order:
            raise ValueError(f"need at least {order} bases for order {order}")
        interior = np.linspace(lo, hi, n_basis - order + 2)[1:-1]
        knots = np.r_[np.full(order, lo), interior, np.full(order, hi)]
        return cls(order, knots)

    def to_dict(self) -> dict:
        return {"order": self.order, "knots": [float(k) for k in self.knots]}


def evaluate_basis(basis: BSplineBasis, grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    lo, hi = basis.span
    if grid.size and (grid.min() < lo or grid.max() > hi):
        raise ValueError(f"grid [{grid.min()}, {grid.max()}] lies outside the knot span [{lo}, {hi}]")
    return BSpline.design_matrix(grid, basis.knots, basis.order - 1).toarray()


@dataclass(eq=False)
class SplineSourceModel:
    """Gaussian model on B-spline coefficients of one source's spectra."""

    basis: BSplineBasis
    grid: np.ndarray
    mean_coeffs: np.ndarray
    coeff_cov: np.ndarray
    source_id: str = ""
    n_replicates: int = 0
    #: per-replicate RMS of the part of each spectrum the basis cannot carry
    residual_sd: Optional[np.ndarray] = None
    _matrix: Optional[np.ndarray] = field(default=None, repr=False)
    _factor: Optional[np.ndarray] = field(default=None, repr=False)
    _ortho: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def basis_matrix(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = evaluate_basis(self.basis, self.grid)
        return self._matrix

    @property
    def factor(self) -> np.ndarray:
        """Symmetric square root of the covariance with negative eigenvalues clipped at 0."""
        if self._factor is None:
            w, V = np.linalg.eigh(self.coeff_cov)
            self._factor = V * np.sqrt(np.clip(w, 0.0, None))
        return self._factor

    @property
    def orthonormal_basis(self) -> np.ndarray:
        """Orthonormal columns spanning the basis matrix (thin QR)."""
        if self._ortho is None:
            self._ortho = np.linalg.qr(self.basis_matrix, mode="reduced")[0]
        return self._ortho

    def mean_spectrum(self) -> Spectrum:
        return Spectrum(self.grid, self.basis_matrix @ self.mean_coeffs, self.source_id, "model-mean")


def project_coefficients(basis_matrix: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Least-squares coefficients for the columns of ``Y`` via a thin QR."""
    Q, R = np.linalg.qr(basis_matrix, mode="reduced")
    d = np.abs(np.diag(R))
    if d.size == 0 or d.min() <= 1e-10 * d.max():
        raise RankDeficientBasisError(
            f"basis matrix ({basis_matrix.shape[0]} points x {basis_matrix.shape[1]} bases) is rank "
            "deficient; use fewer bases for this grid")
    return solve_triangular(R, Q.T @ Y)


def default_basis(grid, n_basis: int = 300, order: int = 4) -> BSplineBasis:
    grid = np.asarray(grid, dtype=float)
    return BSplineBasis.clamped_uniform(float(grid[0]), float(grid[-1]), n_basis, order)


def fit_spline_model(spectra: Sequence[Spectrum], basis: Optional[BSplineBasis] = None) -> SplineSourceModel:
    if len(spectra) < 2:
        raise ValueError("need at least 2 replicates to fit a source model")
    grid = spectra[0].grid
    for sp in spectra[1:]:
        if not np.array_equal(sp.grid, grid):
            raise ValueError("all spectra must share one grid")
    basis = basis or default_basis(grid)
    B = evaluate_basis(basis, grid)
    Y = np.stack([sp.values for sp in spectra], axis=1)
    coeffs = project_coefficients(B, Y).T
    cov = np.cov(coeffs, rowvar=False, ddof=1)
    cov = 0.5 * (cov + cov.T)
    resid = Y - B @ coeffs.T
    # per-point RMS, not dof-corrected: the basis already carries its share of the noise
    residual_sd = np.sqrt(np.mean(resid * resid, axis=0))
    return SplineSourceModel(basis, grid, coeffs.mean(axis=0), cov, spectra[0].source_id,
                             len(spectra), residual_sd, _matrix=B)


def resample_spectra(model: SplineSourceModel, count: int, seed,
                     residual_noise: bool = True) -> list[Spectrum]:
    """Pseudo-spectra ``B (mean + F z)``; draw ``k`` uses the stream ``(seed, k)``.

    With ``residual_noise`` each draw also gets white noise restricted to the
    orthogonal complement of the basis, scaled to the residual level of a
    uniformly chosen fitted replicate.  This restores the fine-scale noise the
    basis smooths away (and its replicate-to-replicate spread) while leaving
    the coefficient distribution exactly ``N(mean, cov)``.
    """
    if count < 1:
        raise ValueError("count must be positive")
    F = model.factor
    G, nb = model.basis_matrix.shape
    add_noise = (residual_noise and model.residual_sd is not None and len(model.residual_sd) > 0
                 and G > nb)
    if add_noise:
        Q = model.orthonormal_basis
        # residual_sd is a per-point RMS over G points of a (G - nb)-dimensional residual
        inflate = math.sqrt(G / (G - nb))
    rows = []
    for k in range(count):
        rng = _rng.stream(seed, k)
        v = (model.mean_coeffs + F @ rng.standard_normal(F.shape[1])) @ model.basis_matrix.T
        if add_noise:
            sd = model.residual_sd[int(rng.integers(len(model.residual_sd)))]
            e = rng.standard_normal(G)
            e -= Q @ (Q.T @ e)
            v = v + inflate * sd * e
        rows.append(v)
    values = np.stack(rows)
    return [Spectrum(model.grid, v, model.source_id, f"pseudo-{k}") for k, v in enumerate(values)]


# -- synthetic libraries ----------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs of the synthetic source generator.

    ``separation`` scales each source's own peaks on top of a shared base
    template; ``scale_spread`` draws a per-source factor in
    ``[1 - scale_spread, 1]`` so pairwise dissimilarities cover a range.
    Each replicate adds i.i.d. white noise of level ``noise``, multiplied by
    a per-replicate log-normal factor with log-sd ``noise_jitter``; the
    jitter gives replicates an additive effect on their pairwise scores.

    ``n_common > 0`` makes the first ``n_common`` sources share the signature
    of source 0, each keeping only ``common_jitter`` of its own peaks, so the
    signature is common in the population; ``common_scale`` multiplies that
    shared signature, and values below 1 pull the group towards the base
    template that every source shares.  ``rare_factor`` multiplies the
    own-peak amplitude of the last source, making its signature rare.
    """

    n_sources: int = 20
    n_replicates: int = 7
    grid_size: int = 700
    wavenumber_min: float = 550.0
    wavenumber_max: float = 4000.0
    separation: float = 0.5
    noise: float = 0.01
    noise_jitter: float = 0.2
    n_base_peaks: int = 12
    n_source_peaks: int = 3
    scale_spread: float = 0.0
    n_common: int = 0
    common_jitter: float = 0.25
    common_scale: float = 1.0
    rare_factor: float = 1.0

    def __post_init__(self):
        if self.n_sources < 1 or self.n_replicates < 1 or self.grid_size < 2:
            raise ValueError("n_sources, n_replicates must be >= 1 and grid_size >= 2")
        if self.separation < 0 or self.noise < 0 or self.noise_jitter < 0:
            raise ValueError("separation, noise and noise_jitter must be nonnegative")
        if not 0 <= self.scale_spread <= 1:
            raise ValueError("scale_spread must lie in [0, 1]")
        if (not 0 <= self.n_common <= self.n_sources or self.common_jitter < 0 or self.common_scale < 0
                or self.rare_factor < 0):
            raise ValueError("need 0 <= n_common <= n_sources and nonnegative common_jitter, "
                             "common_scale, rare_factor")

    def to_dict(self) -> dict:
        return asdict(self)


def _peaks(grid: np.ndarray, rng: np.random.Generator, count: int) -> np.ndarray:
    lo, hi = grid[0], grid[-1]
    width = hi - lo
    centers = rng.uniform(lo + 0.05 * width, hi - 0.05 * width, count)
    heights = rng.uniform(0.2, 1.0, count)
    sds = rng.uniform(0.003, 0.012, count) * width
    return np.sum(heights[:, None] * np.exp(-0.5 * ((grid[None, :] - centers[:, None]) / sds[:, None]) ** 2),
                  axis=0)


def source_templates(config: SyntheticConfig, seed) -> tuple[np.ndarray, np.ndarray]:
    """Grid and the ``n_sources x grid`` noiseless source templates."""
    grid = np.linspace(config.wavenumber_min, config.wavenumber_max, config.grid_size)
    base = _peaks(grid, _rng.stream(seed, 0), config.n_base_peaks)
    signatures = []
    for i in range(config.n_sources):
        rng = _rng.stream(seed, 1, i)
        own = _peaks(grid, rng, config.n_source_peaks)
        scale = 1.0 - config.scale_spread * rng.uniform()
        signatures.append(scale * own)
    if config.n_common:
        signatures[0] = config.common_scale * signatures[0]
    for i in range(1, config.n_common):
        signatures[i] = signatures[0] + config.common_jitter * signatures[i]
    if config.n_sources > max(config.n_common, 1):
        signatures[-1] = config.rare_factor * signatures[-1]
    return grid, np.array([base + config.separation * sig for sig in signatures])


def generate_synthetic_library(config: SyntheticConfig, seed) -> SourceLibrary:
    grid, templates = source_templates(config, seed)
    sources = {}
    for i, tmpl in enumerate(templates):
        rng = _rng.stream(seed, 2, i)
        sid = f"S{i:03d}"
        reps = []
        for r in range(config.n_replicates):
            level = config.noise * math.exp(config.noise_jitter * rng.standard_normal())
            values = tmpl + level * rng.standard_normal(len(grid))
            reps.append(Spectrum(grid, values, sid, f"r{r}"))
        sources[sid] = reps
    return SourceLibrary(sources, grid)
