"""Command-line driver: train, eval, metrics, ratelab, gradcheck.

Exit codes are a contract: 0 success, 1 a check failed (gradient check above
tolerance), 2 user error (bad config, missing file, incompatible inputs), 3
numeric abort during training. Every artifact directory gets a ``run.json``
manifest carrying the configuration hash, so results remain traceable to the
exact settings that produced them. ``MOELAB_OUT`` sets the default output
root (fallback: ./runs).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import schedule as sc
from .config import ConfigError, RunConfig, load_config
from .data import generate_corpus, split_corpus
from .gradcheck import SCOPES, run_gradcheck
from .routing_metrics import (
    expert_change_rate,
    level_learning,
    read_assignment_table,
    selection_entropy,
    write_assignment_table,
)
from .statlab.rates import (
    bootstrap_slope_ci,
    median_slopes,
    raw_slope_with_ci,
    run_rate_experiment,
    write_rate_csv,
)
from .training import (
    TrainingAbort,
    eval_model,
    restore_model,
    run_training,
    write_eval_csv,
    write_metrics_csv,
)

__all__ = ["main"]

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USER_ERROR = 2
EXIT_NUMERIC_ABORT = 3

ROUTINGS = ("router", "competition", "rank-shift")


def _out_root() -> Path:
    return Path(os.environ.get("MOELAB_OUT", "runs"))


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _write_manifest(out_dir: Path, cfg: RunConfig, command: str, **extra) -> None:
    doc = {
        "schema_version": 1,
        "command": command,
        "config_sha": cfg.sha,
        "config": cfg.resolved,
        **extra,
    }
    (out_dir / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_USER_ERROR)

    tag = "baseline" if args.baseline else "compete"
    out_dir = Path(args.out) if args.out else _out_root() / f"train-{tag}-{cfg.sha[:12]}"
    out_dir.mkdir(parents=True, exist_ok=True)

    corpus = generate_corpus(cfg.data)
    try:
        result = run_training(cfg.model, cfg.train, corpus, out_dir=out_dir,
                              baseline=args.baseline,
                              checkpoint_extra={"config_sha": cfg.sha})
    except TrainingAbort as exc:
        diag_path = out_dir / "abort.json"
        diag = dict(exc.diagnostics)
        diag["config_sha"] = cfg.sha
        diag_path.write_text(json.dumps(diag, indent=2, sort_keys=True,
                                        default=str) + "\n")
        print(f"error: {exc}", file=sys.stderr)
        print(f"diagnostics: {diag_path}", file=sys.stderr)
        return EXIT_NUMERIC_ABORT

    write_metrics_csv(result.metrics_rows, out_dir / "metrics.csv")
    write_eval_csv(result.eval_rows, out_dir / "eval.csv")
    if result.schedule is not None:
        audit = result.schedule
    else:
        # a baseline run has no sampled schedule; audit the effective one
        spec = sc.ScheduleSpec(
            n_layers=cfg.model.n_layers, horizon=cfg.train.steps, omega=0.0,
            a_max=cfg.train.a_max, warmup_frac=cfg.train.warmup_frac,
            seed=cfg.train.schedule_seed)
        matrix = np.zeros((cfg.model.n_layers, cfg.train.steps), dtype=np.int8)
        audit = sc.ScheduleResult(spec=spec, matrix=matrix, dropped=0)
    (out_dir / "schedule.json").write_text(sc.schedule_to_text(audit))

    final = result.eval_rows[-1]
    _write_manifest(
        out_dir, cfg, "train",
        baseline=args.baseline,
        dropped_activations=result.dropped_activations,
        final_val_ppl=final["val_ppl"],
        artifacts=sorted(p.name for p in out_dir.iterdir() if p.name != "run.json"),
    )
    print(f"out: {out_dir}")
    print(f"final val ppl: {final['val_ppl']:.4f} (nll {final['val_nll']:.4f})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_USER_ERROR)
    try:
        model, _, manifest = restore_model(args.checkpoint)
    except FileNotFoundError:
        return _fail(f"checkpoint not found: {args.checkpoint}", EXIT_USER_ERROR)
    except ValueError as exc:
        return _fail(f"checkpoint rejected: {exc}", EXIT_USER_ERROR)

    routing = args.routing.replace("-", "_")
    if routing == "rank_shift" and model.config.k_active + 1 > model.config.n_experts:
        return _fail("rank-shift needs K+1 <= N experts", EXIT_USER_ERROR)
    if model.config.vocab_size != cfg.data.vocab_size:
        return _fail(
            f"checkpoint vocab ({model.config.vocab_size}) does not match "
            f"configured data vocab ({cfg.data.vocab_size})", EXIT_USER_ERROR)

    corpus = generate_corpus(cfg.data)
    _, val = split_corpus(corpus, cfg.train.val_frac)
    result = eval_model(model, val, routing, max_windows=args.windows,
                        checkpoint_step=int(manifest.get("step", -1)))

    out_dir = Path(args.out) if args.out else _out_root() / f"eval-{cfg.sha[:12]}"
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path = out_dir / f"assignments-{routing}.csv"
    write_assignment_table(result.table, table_path)
    summary = {
        "routing": routing,
        "checkpoint": str(args.checkpoint),
        "checkpoint_step": int(manifest.get("step", -1)),
        "val_nll": result.nll,
        "val_ppl": result.ppl,
        "n_tokens": result.n_tokens,
        "fingerprint": result.table.fingerprint,
        "config_sha": cfg.sha,
    }
    summary_path = out_dir / f"eval-{routing}.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_manifest(out_dir, cfg, "eval", routing=routing,
                    artifacts=[table_path.name, summary_path.name])
    print(f"val ppl: {result.ppl:.4f} (nll {result.nll:.4f}, {result.n_tokens} tokens)")
    print(f"assignment table: {table_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# metrics


def cmd_metrics(args) -> int:
    try:
        table_a = read_assignment_table(args.table_a)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        return _fail(f"cannot read table {args.table_a}: {exc}", EXIT_USER_ERROR)
    table_b = None
    if args.table_b is not None:
        try:
            table_b = read_assignment_table(args.table_b)
        except (FileNotFoundError, ValueError, KeyError) as exc:
            return _fail(f"cannot read table {args.table_b}: {exc}", EXIT_USER_ERROR)

    kind = args.kind
    try:
        if kind == "ecr":
            if table_b is None:
                return _fail("ecr needs two tables", EXIT_USER_ERROR)
            values = {"ecr": expert_change_rate(table_a, table_b)}
        elif kind == "level-learning":
            if table_b is None:
                return _fail("level-learning needs two tables", EXIT_USER_ERROR)
            raw, norm = level_learning(table_a, table_b)
            values = {"level_learning_raw": raw, "level_learning_norm": norm}
        else:  # entropy
            per_layer = selection_entropy(table_a)
            values = {"entropy_bits_mean": float(per_layer.mean()),
                      "entropy_bits_per_layer": [float(v) for v in per_layer]}
    except ValueError as exc:
        return _fail(str(exc), EXIT_USER_ERROR)

    for key, val in values.items():
        print(f"{key}: {val}")
    if args.out:
        Path(args.out).write_text(json.dumps(values, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ratelab


def cmd_ratelab(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_USER_ERROR)
    spec = cfg.statlab
    if args.workers is not None:
        spec = replace(spec, workers=args.workers)

    jobs = len(spec.n_grid) * spec.reps
    if args.dry_run:
        print(f"experiment: {spec.experiment_id}")
        print(f"  expert kind : {spec.expert_kind}")
        print(f"  fitted atoms: {spec.n_fit}")
        print(f"  sample grid : {list(spec.n_grid)}")
        print(f"  replications: {spec.reps}  (jobs: {jobs})")
        print(f"  method      : {spec.method}, restarts {spec.restarts}")
        print(f"  workers     : {spec.workers}")
        return EXIT_OK

    out_dir = Path(args.out) if args.out else _out_root() / f"ratelab-{cfg.sha[:12]}"
    out_dir.mkdir(parents=True, exist_ok=True)

    done = {"count": 0}

    def progress(row):
        done["count"] += 1
        print(f"  [{done['count']:4d}/{jobs}] n={row.n:<7d} rep={row.rep:<3d} "
              f"loss={row.loss:.5f} status={row.fit_status}", flush=True)

    rows = run_rate_experiment(spec, progress=None if spec.workers > 1 else progress)
    write_rate_csv(rows, out_dir / "rates.csv")

    slopes = median_slopes(rows)
    summary_lines = [f"experiment: {spec.experiment_id}"]
    summary = {"experiment_id": spec.experiment_id, "config_sha": cfg.sha,
               "slopes": {}}
    for key, slope in slopes.items():
        if np.isfinite(slope):
            lo, hi = bootstrap_slope_ci(rows, key, seed=0)
            note = ""
        else:
            # grid too small for per-size medians; fit the raw rows instead
            try:
                slope, (lo, hi) = raw_slope_with_ci(rows, key, seed=0)
            except ValueError:
                summary_lines.append(f"  {key:20s} slope n/a (too few usable rows)")
                continue
            note = "  (raw rows)"
        summary_lines.append(
            f"  {key:20s} slope {slope:+.3f}  CI95 [{lo:+.3f}, {hi:+.3f}]{note}")
        summary["slopes"][key] = {"slope": slope, "ci95": [lo, hi],
                                  "from_medians": note == ""}
    n_failed = sum(not r.usable() for r in rows)
    summary_lines.append(f"  failed fits: {n_failed}/{len(rows)}")
    summary["failed_fits"] = n_failed

    (out_dir / "slopes.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_manifest(out_dir, cfg, "ratelab",
                    artifacts=["rates.csv", "slopes.json"])
    print("\n".join(summary_lines))
    print(f"out: {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    summary = run_gradcheck(scope=args.scope, seed=args.seed, tol=args.tol)
    for line in summary.lines():
        print(line)
    if summary.ok():
        print(f"all {len(summary.cases)} cases within tol={args.tol:g}")
        return EXIT_OK
    worst = max(summary.failures(), key=lambda c: c.report.max_rel_error)
    print(f"FAILED: worst offender {worst.name} "
          f"(max_rel_err={worst.report.max_rel_error:.3e}, tol={args.tol:g})",
          file=sys.stderr)
    return EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moelab",
        description="Competition-routed sparse mixture-of-experts laboratory.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model (optionally baseline)")
    p_train.add_argument("--config", default=None, help="JSON config path")
    p_train.add_argument("--out", default=None, help="output directory")
    p_train.add_argument("--baseline", action="store_true",
                         help="disable competition (control run)")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("checkpoint", help="checkpoint path")
    p_eval.add_argument("--config", default=None, help="JSON config path")
    p_eval.add_argument("--routing", choices=ROUTINGS, default="router")
    p_eval.add_argument("--windows", type=int, default=0,
                        help="cap on evaluation windows (0: all)")
    p_eval.add_argument("--out", default=None, help="output directory")
    p_eval.set_defaults(func=cmd_eval)

    p_metrics = sub.add_parser("metrics", help="compare assignment tables")
    p_metrics.add_argument("table_a", help="assignment table CSV")
    p_metrics.add_argument("table_b", nargs="?", default=None,
                           help="second table (for ecr / level-learning)")
    p_metrics.add_argument("--kind", choices=("ecr", "level-learning", "entropy"),
                           required=True)
    p_metrics.add_argument("--out", default=None, help="write values as JSON")
    p_metrics.set_defaults(func=cmd_metrics)

    p_rate = sub.add_parser("ratelab", help="run a convergence-rate experiment")
    p_rate.add_argument("--config", default=None, help="JSON config path")
    p_rate.add_argument("--out", default=None, help="output directory")
    p_rate.add_argument("--workers", type=int, default=None,
                        help="override worker-pool size")
    p_rate.add_argument("--dry-run", action="store_true",
                        help="validate config and print the job plan")
    p_rate.set_defaults(func=cmd_ratelab)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p_grad.add_argument("--scope", choices=SCOPES, default="full")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--tol", type=float, default=1e-5)
    p_grad.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
