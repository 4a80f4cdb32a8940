"""Rejection rate against source dissimilarity, binned into quantiles, for several N.

Example:
    python scripts/power_curve.py --N 5 15 --K 1000 --out power/
"""
import argparse
import time
from pathlib import Path

import numpy as np

from twostage.calibration import ObjectSupply, SupplyConfig, calibrate_c_alpha, power_curve
from twostage.spectra import SyntheticConfig, generate_synthetic_library


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sources", type=int, default=30)
    ap.add_argument("--replicates", type=int, default=25)
    ap.add_argument("--separation", type=float, default=0.08)
    ap.add_argument("--N", type=int, nargs="+", default=[5, 15])
    ap.add_argument("--M", type=int, default=1)
    ap.add_argument("--alpha", type=float, default=0.05)
    ap.add_argument("--K", type=int, default=1000)
    ap.add_argument("--K-outer", type=int, default=1000)
    ap.add_argument("--K-inner", type=int, default=500)
    ap.add_argument("--bins", type=int, default=5)
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", type=Path, default=None, help="directory for power_N*.csv files")
    args = ap.parse_args()

    lib = generate_synthetic_library(
        SyntheticConfig(n_sources=args.sources, n_replicates=args.replicates,
                        separation=args.separation, scale_spread=1.0), args.seed)
    supply = ObjectSupply(lib, SupplyConfig())
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)

    curves = {}
    for N in args.N:
        t0 = time.time()
        c = calibrate_c_alpha(lib, N, args.M, K_outer=args.K_outer, K_inner=args.K_inner,
                              seed=(args.seed, 100, N), supply=supply,
                              threads=args.threads).c_for(args.alpha)
        curves[N] = power_curve(lib, N, args.M, c, args.K, (args.seed, 300), K_inner=args.K_inner,
                                supply=supply, threads=args.threads)
        print(f"N={N}: c={c:.5f}, {time.time() - t0:.1f}s")
        if args.out:
            curves[N].to_csv(args.out / f"power_N{N}.csv")

    # bins are fixed by the first N so that all curves are compared on the same pairs
    edges = np.quantile(curves[args.N[0]].dissimilarity, np.linspace(0, 1, args.bins + 1))
    print("bin".ljust(24) + "".join(f"N={N}".rjust(10) for N in args.N))
    rows = {N: curves[N].binned(edges) for N in args.N}
    for b in range(args.bins):
        lo, hi = edges[b], edges[b + 1]
        print(f"[{lo:.4f}, {hi:.4f}]".ljust(24)
              + "".join(f"{rows[N][b][3]:10.3f}" for N in args.N))


if __name__ == "__main__":
    main()
