"""Convergence-rate sweep for the Gaussian mixture-of-experts estimator.

Runs the exact-specified and over-specified fits for one expert family
over a grid of sample sizes, then reports log-log slopes of the median
errors with bootstrap confidence intervals. Linear experts use the full
grid; --kind ffn drops to the reduced grid since each fit is pricier.
"""

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from moelab.statlab.rates import (
    DEFAULT_GRID,
    REDUCED_GRID,
    RateLabSpec,
    bootstrap_slope_ci,
    median_slopes,
    run_rate_experiment,
    write_rate_csv,
)

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--kind", choices=("linear", "ffn"), default="linear")
parser.add_argument("--reps", type=int, default=20)
parser.add_argument("--restarts", type=int, default=4)
parser.add_argument("--method", choices=("pgd", "lbfgs"), default="lbfgs")
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--out", default="rate_results", help="directory for CSVs")
args = parser.parse_args()

grid = DEFAULT_GRID if args.kind == "linear" else REDUCED_GRID
out_dir = Path(args.out)
out_dir.mkdir(parents=True, exist_ok=True)

for n_fit, label in ((2, "exact"), (3, "over")):
    spec = RateLabSpec(expert_kind=args.kind, n_fit=n_fit, n_grid=grid,
                       reps=args.reps, seed=args.seed, restarts=args.restarts,
                       method=args.method)
    t0 = time.time()
    rows = run_rate_experiment(spec)
    elapsed = time.time() - t0

    csv_path = out_dir / f"{spec.experiment_id}.csv"
    write_rate_csv(rows, csv_path)

    print(f"{spec.experiment_id}: {len(rows)} fits in {elapsed:.0f}s -> {csv_path}")
    for key, slope in median_slopes(rows).items():
        if slope != slope:  # fewer than 3 usable sizes
            print(f"  {key:20s} n/a")
            continue
        lo, hi = bootstrap_slope_ci(rows, key, seed=0)
        print(f"  {key:20s} slope {slope:+.3f}  CI95 [{lo:+.3f}, {hi:+.3f}]")
    failed = sum(not r.usable() for r in rows)
    if failed:
        print(f"  WARNING: {failed} fits failed")
