"""Command-line front end.

    twostage ingest    --library spectra.csv
    twostage simulate  --out DIR [--from spectra.csv --count 10]
    twostage test      --trace t.csv --control c.csv (--c-alpha C | --calibration cal.json)
    twostage calibrate --library spectra.csv --N 5 10 --M 3 --out DIR
    twostage power     --library spectra.csv --N 5 --calibration cal.json --out DIR
    twostage rmp       --library spectra.csv --trace-source S001 --calibration cal.json --out DIR
    twostage diagnose  --library spectra.csv --out DIR

Every option may also come from a JSON document given with ``--config``;
explicit flags win over the document, which wins over built-in defaults.
Commands that write files also write ``manifest.json`` with the resolved
configuration, its hash, the input and output file digests and the package
versions.  ``--threads`` and ``--out`` are excluded: they do not affect any
result.

Exit codes: 0 success, 2 input error, 3 missing prerequisite (no c(alpha)),
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
from importlib import metadata
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

from . import _rng
from .calibration import (DEFAULT_ALPHAS, CalibrationTable, SupplyConfig, ObjectSupply,
                          calibrate_c_alpha, estimate_rmp, normality_diagnostics, power_curve,
                          write_calibration_csv)
from .inference import ConditionalCovarianceError, test_statistic
from .kernel import KernelError, KernelSpec, pairwise_scores
from .posterior import PosteriorError, PriorConfig
from .spectra import (FORMATS, BSplineBasis, SourceLibrary, SyntheticConfig, fit_spline_model,
                      generate_synthetic_library, library_from_spectra, load_library,
                      resample_spectra, write_library)

EXIT_OK, EXIT_INPUT, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

# keys never written to the manifest: they cannot change any output
_NON_RESULT_KEYS = ("threads", "out", "config")

COMMON_DEFAULTS = {"seed": 0, "threads": 1, "format": "long-csv", "kernel": {}, "prior": {},
                   "supply": {}}

DEFAULTS = {
    "ingest": {"library": None},
    "simulate": {"out": None, "from_library": None, "count": 10, "synthetic": {}},
    "test": {"trace": None, "control": None, "K": 1000, "alpha": 0.05, "c_alpha": None,
             "calibration": None, "out": None},
    "calibrate": {"library": None, "N": [5], "M": 3, "alphas": list(DEFAULT_ALPHAS),
                  "K_outer": 2000, "K_inner": 1000, "out": None},
    "power": {"library": None, "N": 5, "M": 3, "K": 2000, "K_inner": 1000, "alpha": 0.05,
              "c_alpha": None, "calibration": None, "out": None},
    "rmp": {"library": None, "N": 5, "M": 3, "K_inner": 1000, "alpha": 0.05, "c_alpha": None,
            "calibration": None, "trace_source": None, "trace": None, "exclude": None,
            "repetitions": 1, "resample_controls": False, "out": None},
    "diagnose": {"library": None, "group_size": 3, "out": None},
}


class InputError(Exception):
    """Bad arguments or configuration; exit status 2."""


class MissingPrerequisite(Exception):
    """A required earlier step (calibration) has not been run; exit status 3."""


# -- argument handling --------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON document with option values")
    p.add_argument("--seed", type=int, help="top-level seed (default 0)")
    p.add_argument("--threads", type=int, help="worker threads; results do not depend on it")
    p.add_argument("--format", choices=FORMATS, help="spectra file format (default long-csv)")
    p.add_argument("--mask", choices=("low-signal", "none"), help="kernel mask policy")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twostage",
                                     description="Common-source testing and match probabilities for spectra.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a spectra file and print a summary")
    p.add_argument("--library")

    p = sub.add_parser("simulate", help="write a synthetic library or pseudo-spectra")
    p.add_argument("--out")
    p.add_argument("--from", dest="from_library", help="fit spline models to this library and resample")
    p.add_argument("--count", type=int, help="pseudo-spectra per source with --from")
    p.add_argument("--n-sources", type=int)
    p.add_argument("--n-replicates", type=int)
    p.add_argument("--separation", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--grid-size", type=int)

    p = sub.add_parser("test", help="common-source test of traces against controls")
    p.add_argument("--trace")
    p.add_argument("--control")
    p.add_argument("--K", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--c-alpha", type=float)
    p.add_argument("--calibration", help="calibration.json written by 'calibrate'")
    p.add_argument("--out")

    p = sub.add_parser("calibrate", help="threshold c(alpha) from same-source simulations")
    p.add_argument("--library")
    p.add_argument("--N", type=int, nargs="+")
    p.add_argument("--M", type=int)
    p.add_argument("--alphas", type=float, nargs="+")
    p.add_argument("--K-outer", type=int)
    p.add_argument("--K-inner", type=int)
    p.add_argument("--out")

    p = sub.add_parser("power", help="rejection rate against source dissimilarity")
    p.add_argument("--library")
    p.add_argument("--N", type=int)
    p.add_argument("--M", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--K-inner", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--c-alpha", type=float)
    p.add_argument("--calibration")
    p.add_argument("--out")

    p = sub.add_parser("rmp", help="random match probability of a trace in a library")
    p.add_argument("--library")
    p.add_argument("--N", type=int)
    p.add_argument("--M", type=int, help="traces taken from --trace-source")
    p.add_argument("--K-inner", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--c-alpha", type=float)
    p.add_argument("--calibration")
    p.add_argument("--trace-source", help="use the first M replicates of this source as the trace")
    p.add_argument("--trace", help="trace spectra file (alternative to --trace-source)")
    p.add_argument("--exclude", help="source left out of the population with --trace")
    p.add_argument("--repetitions", type=int)
    p.add_argument("--resample-controls", action="store_true", default=None)
    p.add_argument("--out")

    p = sub.add_parser("diagnose", help="normality diagnostics of within-source score vectors")
    p.add_argument("--library")
    p.add_argument("--group-size", type=int)
    p.add_argument("--out")

    for name, sp in sub.choices.items():
        _add_common(sp)
    return parser


_SYNTH_FLAGS = ("n_sources", "n_replicates", "separation", "noise", "grid_size")


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge built-in defaults, the ``--config`` document and explicit flags."""
    cmd = args.command
    cfg = {**COMMON_DEFAULTS, **DEFAULTS[cmd]}
    cfg = json.loads(json.dumps(cfg))  # deep copy
    if args.config:
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise InputError("config must be a JSON object")
        unknown = sorted(set(doc) - set(cfg))
        if unknown:
            raise InputError(f"unknown config keys for '{cmd}': {unknown}")
        cfg.update(doc)
    flags = vars(args)
    for key in cfg:
        if key in flags and flags[key] is not None:
            cfg[key] = flags[key]
    if flags.get("mask") is not None:
        cfg["kernel"] = {**cfg["kernel"], "mask": {**cfg["kernel"].get("mask", {}), "kind": flags["mask"]}}
    if cmd == "simulate":
        cfg["synthetic"] = {**cfg["synthetic"],
                            **{k: flags[k] for k in _SYNTH_FLAGS if flags.get(k) is not None}}
    if cmd == "calibrate" and isinstance(cfg["N"], int):
        cfg["N"] = [cfg["N"]]
    return cfg


def _need(cfg: dict, *keys: str) -> None:
    for k in keys:
        if cfg.get(k) is None:
            raise InputError(f"--{k.replace('_', '-')} is required")


def _int_at_least(cfg: dict, key: str, lo: int) -> int:
    v = cfg[key]
    if isinstance(v, bool) or not isinstance(v, int) or v < lo:
        raise InputError(f"{key} must be an integer >= {lo}, got {v!r}")
    return v


def _unit(cfg: dict, key: str, closed: bool = False) -> Optional[float]:
    v = cfg.get(key)
    if v is None:
        return None
    ok = (0 <= v <= 1) if closed else (0 < v < 1)
    if not ok:
        raise InputError(f"{key} must lie in {'[0, 1]' if closed else '(0, 1)'}, got {v!r}")
    return float(v)


def validate(cfg: dict, cmd: str) -> dict:
    """Check every numeric field and build the typed objects, before any computation."""
    out = {}
    try:
        out["seed"] = _rng.as_key(cfg["seed"])
    except (TypeError, ValueError) as exc:
        raise InputError(str(exc)) from None
    _int_at_least(cfg, "threads", 1)
    try:
        out["kernel"] = KernelSpec.from_dict(cfg["kernel"])
        out["prior"] = PriorConfig.from_dict(cfg["prior"])
        out["supply"] = SupplyConfig(**cfg["supply"])
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid kernel/prior/supply settings: {exc}") from None
    if cmd in ("test", "power", "rmp"):
        _unit(cfg, "alpha")
        _unit(cfg, "c_alpha", closed=True)
    if cmd == "test":
        _need(cfg, "trace", "control")
        _int_at_least(cfg, "K", 100)
    if cmd == "calibrate":
        _need(cfg, "library", "out")
        if not cfg["N"] or any(isinstance(n, bool) or not isinstance(n, int) or n < 3 for n in cfg["N"]):
            raise InputError(f"N must be integers >= 3, got {cfg['N']!r}")
        _int_at_least(cfg, "M", 1)
        _int_at_least(cfg, "K_outer", 500)
        _int_at_least(cfg, "K_inner", 100)
        if not cfg["alphas"] or any(not 0 < a < 1 for a in cfg["alphas"]):
            raise InputError(f"alphas must lie in (0, 1), got {cfg['alphas']!r}")
    if cmd == "power":
        _need(cfg, "library", "out")
        _int_at_least(cfg, "N", 3)
        _int_at_least(cfg, "M", 1)
        _int_at_least(cfg, "K", 1)
        _int_at_least(cfg, "K_inner", 100)
    if cmd == "rmp":
        _need(cfg, "library", "out")
        _int_at_least(cfg, "N", 3)
        _int_at_least(cfg, "M", 1)
        _int_at_least(cfg, "K_inner", 100)
        _int_at_least(cfg, "repetitions", 1)
        if (cfg["trace_source"] is None) == (cfg["trace"] is None):
            raise InputError("give exactly one of --trace-source and --trace")
    if cmd == "diagnose":
        _need(cfg, "library", "out")
        _int_at_least(cfg, "group_size", 2)
    if cmd == "simulate":
        _need(cfg, "out")
        _int_at_least(cfg, "count", 1)
        try:
            out["synthetic"] = SyntheticConfig(**cfg["synthetic"])
        except (TypeError, ValueError) as exc:
            raise InputError(f"invalid synthetic settings: {exc}") from None
    if cmd == "ingest":
        _need(cfg, "library")
    return out


# -- manifest -----------------------------------------------------------------

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"artifact": pkg, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _input_files(cfg: dict) -> dict:
    keys = ("library", "trace", "control", "calibration", "from_library")
    return {k: {"path": str(cfg[k]), "sha256": _sha256(cfg[k])}
            for k in keys if cfg.get(k) is not None and Path(cfg[k]).is_file()}


def write_manifest(out: Path, cmd: str, cfg: dict, outputs: list[str]) -> None:
    result_cfg = {k: v for k, v in cfg.items() if k not in _NON_RESULT_KEYS}
    canonical = json.dumps(result_cfg, sort_keys=True, separators=(",", ":"))
    manifest = {
        "command": cmd,
        "config": result_cfg,
        "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
        "seed": cfg["seed"],
        "inputs": _input_files(cfg),
        "outputs": {name: _sha256(out / name) for name in sorted(outputs)},
        "versions": _versions(),
    }
    _write_json(out / "manifest.json", manifest)


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _outdir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- thresholds ---------------------------------------------------------------

def _load_tables(path) -> list[CalibrationTable]:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise MissingPrerequisite(f"calibration file {path} not found; run 'twostage calibrate' first") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read calibration file {path}: {exc}") from None
    items = doc.get("tables", [doc]) if isinstance(doc, dict) else doc
    try:
        return [CalibrationTable.from_dict(d) for d in items]
    except (KeyError, TypeError) as exc:
        raise InputError(f"{path} is not a calibration file: {exc}") from None


def resolve_c_alpha(cfg: dict, N: int, M: int) -> float:
    if cfg.get("c_alpha") is not None:
        return float(cfg["c_alpha"])
    if cfg.get("calibration") is None:
        raise MissingPrerequisite(
            "no threshold: pass --c-alpha or --calibration; "
            f"create one with 'twostage calibrate --library LIB --N {N} --M {M} --out DIR'")
    tables = [t for t in _load_tables(cfg["calibration"]) if t.N == N and t.M == M]
    if not tables:
        raise MissingPrerequisite(
            f"{cfg['calibration']} has no table for N={N}, M={M}; "
            f"run 'twostage calibrate --N {N} --M {M}' first")
    try:
        return tables[0].c_for(cfg["alpha"])
    except KeyError as exc:
        raise MissingPrerequisite(f"{exc.args[0]}; recalibrate with --alphas including {cfg['alpha']}") from None


def _load(path, fmt) -> SourceLibrary:
    return load_library(path, fmt)


# -- commands -----------------------------------------------------------------

def cmd_ingest(cfg: dict, typed: dict) -> int:
    lib = _load(cfg["library"], cfg["format"])
    print(json.dumps(lib.summary(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_simulate(cfg: dict, typed: dict) -> int:
    out = _outdir(cfg)
    if cfg["from_library"]:
        src = _load(cfg["from_library"], cfg["format"])
        supply = typed["supply"]
        spectra = []
        for k, sid in enumerate(src.source_ids):
            basis = BSplineBasis.clamped_uniform(src.grid[0], src.grid[-1], supply.n_basis, supply.order)
            model = fit_spline_model(src[sid], basis)
            spectra.extend(resample_spectra(model, cfg["count"], _rng.derive(typed["seed"], k)))
        lib = library_from_spectra(spectra)
    else:
        lib = generate_synthetic_library(typed["synthetic"], typed["seed"])
    write_library(lib, out / "library.csv", cfg["format"])
    write_manifest(out, "simulate", cfg, ["library.csv"])
    return EXIT_OK


def cmd_test(cfg: dict, typed: dict) -> int:
    trace = _load(cfg["trace"], cfg["format"])
    control = _load(cfg["control"], cfg["format"])
    if not np.array_equal(trace.grid, control.grid):
        raise InputError("trace and control spectra are on different grids")
    t_spec = [sp for reps in trace.sources.values() for sp in reps]
    c_spec = [sp for reps in control.sources.values() for sp in reps]
    N, M = len(c_spec), len(t_spec)
    if N < 4:
        raise InputError(f"need at least 4 control spectra (3 leave no lack-of-fit degrees of freedom), got {N}")
    c_alpha = resolve_c_alpha(cfg, N, M)
    part = pairwise_scores(t_spec, c_spec, typed["kernel"])
    seed = typed["seed"] if len(typed["seed"]) > 1 else typed["seed"][0]
    outcome = test_statistic(part.s_m, part.s_n, N, M, typed["prior"], cfg["K"], seed).with_decision(c_alpha)
    text = outcome.to_json()
    print(text)
    level = format(cfg["alpha"], "g")
    if outcome.h <= c_alpha:
        print(f"reject common source at level {level}")
    else:
        print(f"fail to reject at level {level}")
    if cfg.get("out"):
        out = _outdir(cfg)
        (out / "outcome.json").write_text(text + "\n")
        part.to_csv(out / "scores.csv")
        write_manifest(out, "test", cfg, ["outcome.json", "scores.csv"])
    return EXIT_OK


def cmd_calibrate(cfg: dict, typed: dict) -> int:
    lib = _load(cfg["library"], cfg["format"])
    out = _outdir(cfg)
    supply = ObjectSupply(lib, typed["supply"])
    tables = []
    for N in cfg["N"]:
        seed = _rng.derive(typed["seed"], N, cfg["M"])
        t = calibrate_c_alpha(lib, N, cfg["M"], cfg["alphas"], cfg["K_outer"], cfg["K_inner"], seed,
                              typed["kernel"], typed["prior"], supply, cfg["threads"])
        tables.append(t)
    write_calibration_csv(tables, out / "calibration.csv")
    _write_json(out / "calibration.json", {"tables": [t.to_dict() for t in tables]})
    write_manifest(out, "calibrate", cfg, ["calibration.csv", "calibration.json"])
    return EXIT_OK


def cmd_power(cfg: dict, typed: dict) -> int:
    lib = _load(cfg["library"], cfg["format"])
    c_alpha = resolve_c_alpha(cfg, cfg["N"], cfg["M"])
    out = _outdir(cfg)
    curve = power_curve(lib, cfg["N"], cfg["M"], c_alpha, cfg["K"], typed["seed"], cfg["K_inner"],
                        typed["kernel"], typed["prior"], typed["supply"], cfg["threads"])
    curve.to_csv(out / "power.csv")
    write_manifest(out, "power", cfg, ["power.csv"])
    return EXIT_OK


def cmd_rmp(cfg: dict, typed: dict) -> int:
    lib = _load(cfg["library"], cfg["format"])
    if cfg["trace_source"] is not None:
        sid = cfg["trace_source"]
        if sid not in lib.sources:
            raise InputError(f"source {sid!r} not in the library")
        if len(lib[sid]) < cfg["M"]:
            raise InputError(f"source {sid!r} has {len(lib[sid])} replicates, M={cfg['M']} requested")
        trace = lib.values(sid)[:cfg["M"]]
        excluded = sid
    else:
        tlib = _load(cfg["trace"], cfg["format"])
        if not np.array_equal(tlib.grid, lib.grid):
            raise InputError("trace spectra are not on the library grid")
        trace = np.stack([sp.values for reps in tlib.sources.values() for sp in reps])
        excluded = cfg["exclude"]
        if excluded is not None and excluded not in lib.sources:
            raise InputError(f"excluded source {excluded!r} not in the library")
    M = len(trace)
    c_alpha = resolve_c_alpha(cfg, cfg["N"], M)
    out = _outdir(cfg)
    supply = ObjectSupply(lib, typed["supply"])
    rows, summary = [], []
    for r in range(cfg["repetitions"]):
        est = estimate_rmp(trace, lib, excluded, cfg["N"], c_alpha, cfg["K_inner"],
                           _rng.derive(typed["seed"], r), cfg["resample_controls"], typed["kernel"],
                           typed["prior"], supply, cfg["threads"])
        summary.append(est.rmp)
        for s, rec in est.per_source.items():
            rows.append([r, s, repr(float(rec["h"])), int(rec["indistinguishable"]), rec["redraws"]])
    with open(out / "rmp.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["repetition", "source_id", "h", "indistinguishable", "redraws"])
        w.writerows(rows)
    q1, med, q3 = (float(v) for v in np.percentile(summary, [25, 50, 75]))
    _write_json(out / "rmp.json", {"rmp": summary, "median": med, "iqr": q3 - q1,
                                   "n_sources": len(lib) - (excluded is not None),
                                   "trace_source_id": excluded, "N": cfg["N"], "M": M,
                                   "c_alpha": c_alpha})
    write_manifest(out, "rmp", cfg, ["rmp.csv", "rmp.json"])
    return EXIT_OK


def cmd_diagnose(cfg: dict, typed: dict) -> int:
    lib = _load(cfg["library"], cfg["format"])
    out = _outdir(cfg)
    report = normality_diagnostics(lib, typed["kernel"], cfg["group_size"])
    _write_json(out / "normality.json", report)
    write_manifest(out, "diagnose", cfg, ["normality.json"])
    return EXIT_OK


COMMANDS = {"ingest": cmd_ingest, "simulate": cmd_simulate, "test": cmd_test,
            "calibrate": cmd_calibrate, "power": cmd_power, "rmp": cmd_rmp, "diagnose": cmd_diagnose}


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        cfg = resolve_config(args)
        typed = validate(cfg, args.command)
        return COMMANDS[args.command](cfg, typed)
    except MissingPrerequisite as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (PosteriorError, ConditionalCovarianceError, KernelError, ArithmeticError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
