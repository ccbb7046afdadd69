"""Train competition-scheduled and plain top-k models on the synthetic
corpus across several seeds and print a side-by-side summary.

Each seed trains two models from the same initialization and batch order;
the only difference is whether competition steps are scheduled. Prints
final validation perplexity for both plus the router-vs-competition
agreement trajectory (normalized level learning at first and last eval).
"""

import argparse
import csv
import sys
import time
from dataclasses import replace
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from moelab.config import load_config
from moelab.data import generate_corpus
from moelab.training import run_training

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--config", default=None, help="JSON run config (default: built-ins)")
parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
parser.add_argument("--steps", type=int, default=None, help="override train.steps")
parser.add_argument("--csv", default=None, help="optional path for a results CSV")
args = parser.parse_args()

cfg = load_config(args.config)
corpus = generate_corpus(cfg.data)

rows = []
for seed in args.seeds:
    tc = replace(cfg.train, seed=seed, schedule_seed=seed)
    if args.steps is not None:
        tc = replace(tc, steps=args.steps)

    t0 = time.time()
    compete = run_training(cfg.model, tc, corpus)
    base = run_training(cfg.model, tc, corpus, baseline=True)
    elapsed = time.time() - t0

    first, last = compete.eval_rows[0], compete.eval_rows[-1]
    row = {
        "seed": seed,
        "compete_ppl": last["val_ppl"],
        "baseline_ppl": base.eval_rows[-1]["val_ppl"],
        "ll_norm_start": first["ll_norm"],
        "ll_norm_end": last["ll_norm"],
        "dropped_activations": compete.dropped_activations,
        "seconds": elapsed,
    }
    rows.append(row)
    print(f"seed {seed}: compete {row['compete_ppl']:.4f}  "
          f"baseline {row['baseline_ppl']:.4f}  "
          f"ll_norm {row['ll_norm_start']:.3f} -> {row['ll_norm_end']:.3f}  "
          f"[{elapsed:.0f}s]", flush=True)

wins = sum(r["compete_ppl"] <= r["baseline_ppl"] for r in rows)
gains = sum(r["ll_norm_end"] > r["ll_norm_start"] for r in rows)
print(f"\ncompete <= baseline ppl: {wins}/{len(rows)} seeds")
print(f"level learning increased: {gains}/{len(rows)} seeds")

if args.csv:
    with open(args.csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {args.csv}")
