import csv
import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from twostage import calibration
from twostage.calibration import (CalibrationTable, InsufficientReplicatesError, ObjectSupply, PowerCurve,
                                  PowerPoint, SupplyConfig, calibrate_c_alpha, estimate_rmp,
                                  group_score_vectors, normality_diagnostics, normality_from_scores,
                                  power_curve, same_source_statistics, write_calibration_csv)
from twostage.posterior import PosteriorError
from twostage.score_model import ModelParams, simulate_scores
from twostage.spectra import SyntheticConfig, generate_synthetic_library

N, M = 4, 1


@pytest.fixture(scope="module")
def flat_library():
    # separation 0: every source shares one template, so every test is effectively same-source
    return generate_synthetic_library(SyntheticConfig(n_sources=30, n_replicates=8, grid_size=300,
                                                      separation=0.0), 0)


@pytest.fixture(scope="module")
def flat_table(flat_library):
    return calibrate_c_alpha(flat_library, N, M, K_outer=1000, K_inner=200, seed=1)


def test_c_values_nondecreasing_and_bounded(flat_table):
    c = np.array(flat_table.c_values)
    assert np.all(np.diff(c) >= 0)
    assert np.all((0 <= c) & (c <= 1))
    assert len(flat_table.h_samples) == 1000
    np.testing.assert_array_equal(c, np.quantile(flat_table.h_samples, flat_table.alpha_levels))


@settings(max_examples=50, deadline=None)
@given(a=st.floats(0.001, 0.999), b=st.floats(0.001, 0.999))
def test_monotone_alpha_on_one_sample(flat_table, a, b):
    lo, hi = sorted((a, b))
    h = flat_table.h_samples
    assert np.quantile(h, lo) <= np.quantile(h, hi)


def test_calibration_bit_identical_on_rerun(flat_library, flat_table):
    again = calibrate_c_alpha(flat_library, N, M, K_outer=1000, K_inner=200, seed=1)
    assert again.c_values == flat_table.c_values
    assert again.h_samples.tobytes() == flat_table.h_samples.tobytes()


def test_unsorted_alpha_grid(flat_library, flat_table):
    t = calibrate_c_alpha(flat_library, N, M, alpha_levels=(0.5, 0.05), K_outer=1000, K_inner=200, seed=1)
    assert t.c_for(0.05) == flat_table.c_for(0.05)
    assert t.c_for(0.5) == flat_table.c_for(0.5)
    with pytest.raises(KeyError):
        t.c_for(0.1)


def test_calibration_validation(flat_library):
    with pytest.raises(ValueError):
        calibrate_c_alpha(flat_library, N, M, K_outer=499)
    with pytest.raises(ValueError):
        calibrate_c_alpha(flat_library, N, M, alpha_levels=(0.0,), K_outer=500)
    tiny = generate_synthetic_library(SyntheticConfig(n_sources=2, n_replicates=3, grid_size=200), 0)
    with pytest.raises(InsufficientReplicatesError):
        calibrate_c_alpha(tiny, N, M, K_outer=500, supply=SupplyConfig(resample=False))


def test_table_serialisation(tmp_path, flat_table):
    path = tmp_path / "cal.json"
    path.write_text(json.dumps(flat_table.to_dict()))
    back = CalibrationTable.load(path)
    assert back.c_values == flat_table.c_values and back.seed == flat_table.seed
    np.testing.assert_array_equal(back.h_samples, flat_table.h_samples)
    write_calibration_csv([flat_table], tmp_path / "cal.csv")
    rows = list(csv.reader(open(tmp_path / "cal.csv")))
    assert rows[0] == ["alpha_level", "0.05", "0.10", "0.25", "0.50", "0.75", "0.90", "0.95"]
    assert rows[1][0] == "c(alpha)_N=4_M=1"
    assert [float(x) for x in rows[1][1:]] == list(flat_table.c_values)


def test_same_source_uses_one_source_per_iteration(flat_library):
    h, sources, redraws = same_source_statistics(flat_library, N, M, 20, 100, seed=3)
    assert len(h) == len(sources) == len(redraws) == 20
    assert set(sources) <= set(flat_library.source_ids)
    assert np.all((0 <= h) & (h <= 1))


def test_threads_do_not_change_results(flat_library):
    a = same_source_statistics(flat_library, N, M, 12, 100, seed=4, threads=1)
    b = same_source_statistics(flat_library, N, M, 12, 100, seed=4, threads=3)
    assert a[0].tobytes() == b[0].tobytes() and a[1] == b[1]


def test_resampling_fallback():
    lib = generate_synthetic_library(SyntheticConfig(n_sources=3, n_replicates=3, grid_size=200), 2)
    sup = ObjectSupply(lib, SupplyConfig(n_basis=40))
    assert sup.can_supply("S000", 8)
    objs = sup.draw("S000", 8, np.random.default_rng(0))
    assert objs.shape == (8, 200)
    direct = sup.draw("S000", 2, np.random.default_rng(0))
    assert any(np.array_equal(direct[0], v) for v in lib.values("S000"))
    strict = ObjectSupply(lib, SupplyConfig(resample=False))
    with pytest.raises(InsufficientReplicatesError):
        strict.draw("S000", 8, np.random.default_rng(0))


def test_redraw_on_posterior_abort(monkeypatch):
    calls = []

    def fake_h(control, trace, kernel, prior, K_inner, seed):
        calls.append(int(control[0, 0]))
        if len(calls) < 3:
            raise PosteriorError("misfit")
        return 0.5

    monkeypatch.setattr(calibration, "_h", fake_h)
    make = lambda attempt: (np.full((4, 2), attempt), np.zeros((1, 2)))
    h, redraws = calibration._h_redrawing(make, None, None, 100, 0)
    assert (h, redraws, calls) == (0.5, 2, [0, 1, 2])

    monkeypatch.setattr(calibration, "_h", lambda *a: (_ for _ in ()).throw(PosteriorError("misfit")))
    with pytest.raises(PosteriorError, match="6 object sets"):
        calibration._h_redrawing(make, None, None, 100, 0)


# -- power ----------------------------------------------------------------------------------

def test_power_curve_sanity(flat_library, flat_table):
    c = flat_table.c_for(0.05)
    curve = power_curve(flat_library, N, M, c, K=60, seed=2, K_inner=200)
    assert len(curve.points) == 60
    assert np.all(curve.dissimilarity >= 0)
    np.testing.assert_array_equal(curve.rejected, curve.h <= c)
    for p in curve.points:
        if p.trace_source == p.control_source:
            assert p.dissimilarity == 0.0


def test_power_same_source_rate_matches_alpha():
    # a two-source library whose sources share one template: every iteration is a same-source test
    lib = generate_synthetic_library(SyntheticConfig(n_sources=2, n_replicates=40, grid_size=300,
                                                     separation=0.0, noise_jitter=0.0), 7)
    c = calibrate_c_alpha(lib, N, M, K_outer=2000, K_inner=200, seed=1).c_for(0.05)
    curve = power_curve(lib, N, M, c, K=5000, seed=2, K_inner=200)
    assert abs(curve.rejection_rate() - 0.05) <= 0.02


def test_power_curve_csv_sorted(tmp_path):
    pts = [PowerPoint(0.3, 0.01, True, "a", "b"), PowerPoint(0.0, 0.4, False, "a", "a"),
           PowerPoint(0.1, 0.2, False, "b", "c", redraws=1)]
    curve = PowerCurve(pts, 0.05, 5, 3, 0)
    curve.to_csv(tmp_path / "p.csv")
    rows = list(csv.DictReader(open(tmp_path / "p.csv")))
    assert [float(r["dissimilarity"]) for r in rows] == [0.0, 0.1, 0.3]
    assert rows[1]["redraws"] == "1"
    assert curve.binned([0.0, 0.2, 0.3]) == [(0.0, 0.2, 2, 0.0), (0.2, 0.3, 1, 1.0)]


def test_power_needs_two_sources():
    lib = generate_synthetic_library(SyntheticConfig(n_sources=1, n_replicates=8, grid_size=200), 0)
    with pytest.raises(ValueError):
        power_curve(lib, N, M, 0.05, K=10, seed=0)


# -- random match probability -----------------------------------------------------------------

def test_rmp_bounds_and_rational(flat_library, flat_table):
    trace = flat_library.values("S000")[:M]
    est = estimate_rmp(trace, flat_library, "S000", N, flat_table.c_for(0.05), 200, seed=5)
    assert est.n_sources == 29 and "S000" not in est.per_source
    assert 0 <= est.rmp <= 1
    assert Fraction(est.rmp).limit_denominator(29) * 29 == est.n_indistinguishable
    assert est.rmp == est.n_indistinguishable / 29
    for rec in est.per_source.values():
        assert rec["indistinguishable"] == (rec["h"] > flat_table.c_for(0.05))


def test_rmp_identical_sources_near_one_minus_alpha(flat_library, flat_table):
    c = flat_table.c_for(0.05)
    rmps = [estimate_rmp(flat_library.values(sid)[:M], flat_library, sid, N, c, 200, seed=(6, t)).rmp
            for t, sid in enumerate(flat_library.source_ids[:6])]
    se = math.sqrt(0.05 * 0.95 / (6 * 29))
    assert abs(np.mean(rmps) - 0.95) < 3 * se + 0.01


def test_rmp_maximally_separated_trace():
    cfg = SyntheticConfig(n_sources=12, n_replicates=8, grid_size=300, separation=0.05, rare_factor=40.0)
    lib = generate_synthetic_library(cfg, 3)
    c = calibrate_c_alpha(lib, N, M, K_outer=500, K_inner=200, seed=1).c_for(0.05)
    rare = lib.source_ids[-1]
    est = estimate_rmp(lib.values(rare)[:M], lib, rare, N, c, 200, seed=8)
    assert est.rmp <= 1 / 11 + 0.02


def test_rmp_deterministic_and_thread_independent(flat_library, flat_table):
    trace = flat_library.values("S001")[:M]
    a = estimate_rmp(trace, flat_library, "S001", N, flat_table.c_for(0.05), 100, seed=9, threads=1)
    b = estimate_rmp(trace, flat_library, "S001", N, flat_table.c_for(0.05), 100, seed=9, threads=4)
    assert a.to_dict() == b.to_dict()


def test_rmp_csv(tmp_path, flat_library, flat_table):
    est = estimate_rmp(flat_library.values("S002")[:M], flat_library, "S002", N, flat_table.c_for(0.05),
                       100, seed=1)
    est.to_csv(tmp_path / "r.csv")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert list(rows[0]) == ["source_id", "h", "indistinguishable", "redraws"]
    assert len(rows) == 29


def test_rmp_rejects_wrong_grid(flat_library):
    with pytest.raises(ValueError, match="grid"):
        estimate_rmp(np.zeros((1, 10)), flat_library, None, N, 0.05, 100, seed=0)


# -- normality diagnostics ----------------------------------------------------------------------

def test_triplet_count_is_two_per_source():
    lib = generate_synthetic_library(SyntheticConfig(n_sources=7, n_replicates=6, grid_size=200), 1)
    S = group_score_vectors(lib)
    assert S.shape == (14, 3)
    report = normality_diagnostics(lib)
    assert report["n_vectors"] == 14 and report["dimension"] == 3 and report["n_sources"] == 7
    assert len(report["original_pairs"]) == 3


def test_insufficient_replicates_for_groups():
    lib = generate_synthetic_library(SyntheticConfig(n_sources=2, n_replicates=5, grid_size=200), 1)
    with pytest.raises(InsufficientReplicatesError):
        normality_diagnostics(lib)


def test_constant_scores_flag_zero_variance():
    S = np.column_stack([np.full(20, 0.3), np.random.default_rng(0).normal(size=20), np.full(20, 1.0)])
    rep = normality_from_scores(S)
    flags = [a["zero_variance"] for a in rep["original"]]
    assert flags == [True, False, True]
    assert rep["original"][0]["shapiro_p"] is None
    assert rep["original_pairs"][0]["pearson"] is None
    json.dumps(rep, allow_nan=False)


def test_model_generated_scores_look_normal():
    # 50 datasets of 332 triplet score vectors from the score model; 6 p-values per dataset
    rng = np.random.default_rng(0)
    pvals = []
    for _ in range(50):
        S = simulate_scores(ModelParams(0.02, 0.0, 1e-4), 3, 332, rng)
        rep = normality_from_scores(S)
        pvals += [a["shapiro_p"] for a in rep["original"] + rep["projected"]]
    assert stats.kstest(pvals, "uniform").pvalue > 0.01
    assert np.mean(np.array(pvals) < 0.05) < 0.05 + 3 * math.sqrt(0.05 * 0.95 / len(pvals))
