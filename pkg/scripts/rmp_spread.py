"""Random match probability per trace source with resampled controls, at several N.

Each source in turn supplies the trace (its first M replicates); the RMP is
repeated with fresh pseudo-spectrum controls so its spread can be compared
across N.

Example:
    python scripts/rmp_spread.py --N 5 10 --repetitions 20 --out rmp.csv
"""
import argparse
import csv
import time
from pathlib import Path

import numpy as np

from twostage.calibration import ObjectSupply, SupplyConfig, calibrate_c_alpha, estimate_rmp
from twostage.spectra import SyntheticConfig, generate_synthetic_library


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sources", type=int, default=20)
    ap.add_argument("--separation", type=float, default=0.045)
    ap.add_argument("--n-common", type=int, default=1)
    ap.add_argument("--common-jitter", type=float, default=0.25)
    ap.add_argument("--common-scale", type=float, default=0.3)
    ap.add_argument("--rare-factor", type=float, default=3.0)
    ap.add_argument("--N", type=int, nargs="+", default=[5, 10])
    ap.add_argument("--M", type=int, default=3)
    ap.add_argument("--alpha", type=float, default=0.05)
    ap.add_argument("--K-outer", type=int, default=500)
    ap.add_argument("--K-inner", type=int, default=500)
    ap.add_argument("--repetitions", type=int, default=20)
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", type=Path, default=None, help="CSV of every RMP estimate")
    args = ap.parse_args()

    lib = generate_synthetic_library(
        SyntheticConfig(n_sources=args.sources, n_replicates=25, separation=args.separation,
                        scale_spread=0.0, n_common=args.n_common, common_jitter=args.common_jitter,
                        common_scale=args.common_scale,
                        rare_factor=args.rare_factor), args.seed)
    supply = ObjectSupply(lib, SupplyConfig())
    ids = lib.source_ids

    rmp = {}
    for N in args.N:
        t0 = time.time()
        c = calibrate_c_alpha(lib, N, args.M, K_outer=args.K_outer, K_inner=args.K_inner,
                              seed=(args.seed, 500, N), supply=supply,
                              threads=args.threads).c_for(args.alpha)
        R = np.empty((len(ids), args.repetitions))
        for t, sid in enumerate(ids):
            trace = lib.values(sid)[:args.M]
            for r in range(args.repetitions):
                R[t, r] = estimate_rmp(trace, lib, sid, N, c, args.K_inner, (args.seed, 400, N, t, r),
                                       resample_controls=True, supply=supply, threads=args.threads).rmp
        rmp[N] = R
        print(f"N={N}: c={c:.5f}, {time.time() - t0:.1f}s")

    print("source".ljust(8) + "".join(f"med N={N}  IQR N={N}  " for N in args.N))
    for t, sid in enumerate(ids):
        cells = []
        for N in args.N:
            q1, med, q3 = np.percentile(rmp[N][t], [25, 50, 75])
            cells.append(f"{med:9.3f}{q3 - q1:9.3f}  ")
        print(sid.ljust(8) + "".join(cells))

    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["N", "trace_source", "repetition", "rmp"])
            for N in args.N:
                for t, sid in enumerate(ids):
                    for r in range(args.repetitions):
                        w.writerow([N, sid, r, repr(float(rmp[N][t, r]))])


if __name__ == "__main__":
    main()
