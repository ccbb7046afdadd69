"""Finite-difference audit of every differentiable piece, scope by scope."""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from moelab.gradcheck import SCOPES, run_gradcheck

parser = argparse.ArgumentParser(description=__doc__.strip())
parser.add_argument("--scope", choices=SCOPES + ("all",), default="all")
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--tol", type=float, default=1e-5)
args = parser.parse_args()

scopes = SCOPES if args.scope == "all" else (args.scope,)
bad = 0
for scope in scopes:
    t0 = time.time()
    summary = run_gradcheck(scope=scope, seed=args.seed, tol=args.tol)
    elapsed = time.time() - t0
    print(f"--- scope {scope}: {len(summary.cases)} cases, {elapsed:.1f}s")
    for line in summary.lines():
        print(f"  {line}")
    bad += len(summary.failures())

print(f"\n{'PASS' if bad == 0 else 'FAIL'}: {bad} case(s) over tol {args.tol:g}")
sys.exit(0 if bad == 0 else 1)
