"""End-to-end CLI tests: every subcommand through main(), artifact shapes,
exit-code contract, and determinism of repeated evaluation."""

import json

import numpy as np
import pytest

from moelab.cli import main
from moelab.config import load_config
from moelab.routing_metrics import AssignmentTable, write_assignment_table
from moelab.schedule import schedule_from_text
from moelab.statlab.rates import read_rate_csv
from moelab.training import load_checkpoint


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps({
        "model": {"d_model": 16, "d_hidden": 24, "n_layers": 2, "context_len": 8},
        "data": {"vocab_size": 12, "n_tokens": 3000},
        "train": {"steps": 12, "batch_size": 4, "eval_windows": 16,
                  "log_every": 5},
        "schedule": {"omega": 0.3, "a_max": 4},
    }))
    return path


@pytest.fixture()
def trained_run(tiny_config, tmp_path):
    out = tmp_path / "run"
    code = main(["train", "--config", str(tiny_config), "--out", str(out)])
    assert code == 0
    return out


class TestTrain:
    def test_artifacts_and_manifest(self, tiny_config, tmp_path, trained_run):
        names = {p.name for p in trained_run.iterdir()}
        assert {"metrics.csv", "eval.csv", "schedule.json", "final.ckpt",
                "run.json"} <= names
        manifest = json.loads((trained_run / "run.json").read_text())
        assert manifest["config_sha"] == load_config(tiny_config).sha
        assert manifest["baseline"] is False
        ckpt_manifest, _ = load_checkpoint(trained_run / "final.ckpt")
        assert ckpt_manifest["extra"]["config_sha"] == manifest["config_sha"]

    def test_schedule_audit_round_trips(self, trained_run):
        audit = schedule_from_text((trained_run / "schedule.json").read_text())
        assert audit.matrix.shape == (2, 12)
        assert audit.column_sums().max() <= 4

    def test_baseline_writes_zero_schedule(self, tiny_config, tmp_path):
        out = tmp_path / "base"
        assert main(["train", "--config", str(tiny_config), "--out", str(out),
                     "--baseline"]) == 0
        audit = schedule_from_text((out / "schedule.json").read_text())
        assert audit.matrix.sum() == 0
        assert audit.spec.omega == 0.0
        manifest = json.loads((out / "run.json").read_text())
        assert manifest["baseline"] is True

    def test_missing_config_is_user_error(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.json")]) == 2

    def test_invalid_config_is_user_error(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"moe": {"k_active": 99}}))
        assert main(["train", "--config", str(path)]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_blowup_aborts_with_diagnostics(self, tmp_path):
        path = tmp_path / "explode.json"
        path.write_text(json.dumps({
            "model": {"d_model": 8, "d_hidden": 8, "n_layers": 1,
                      "context_len": 4},
            "data": {"vocab_size": 8, "n_tokens": 500},
            "train": {"steps": 40, "batch_size": 4, "lr": 1e200,
                      "eval_windows": 4},
        }))
        out = tmp_path / "boom"
        code = main(["train", "--config", str(path), "--out", str(out)])
        assert code == 3
        diag = json.loads((out / "abort.json").read_text())
        assert "step" in diag


class TestEval:
    def test_each_routing_writes_table(self, tiny_config, trained_run, tmp_path):
        out = tmp_path / "ev"
        for routing in ("router", "competition", "rank-shift"):
            code = main(["eval", str(trained_run / "final.ckpt"),
                         "--config", str(tiny_config), "--routing", routing,
                         "--out", str(out), "--windows", "8"])
            assert code == 0
            name = routing.replace("-", "_")
            assert (out / f"assignments-{name}.csv").exists()
            summary = json.loads((out / f"eval-{name}.json").read_text())
            assert summary["val_ppl"] > 0

    def test_repeated_eval_is_identical(self, tiny_config, trained_run, tmp_path):
        outs = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            assert main(["eval", str(trained_run / "final.ckpt"),
                         "--config", str(tiny_config), "--out", str(out),
                         "--windows", "8"]) == 0
            outs.append((out / "assignments-router.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_missing_checkpoint(self, tiny_config, tmp_path):
        assert main(["eval", str(tmp_path / "none.ckpt"),
                     "--config", str(tiny_config)]) == 2

    def test_corrupt_checkpoint(self, tiny_config, trained_run, tmp_path):
        bad = tmp_path / "trunc.ckpt"
        raw = (trained_run / "final.ckpt").read_bytes()
        bad.write_bytes(raw[: len(raw) // 2])
        assert main(["eval", str(bad), "--config", str(tiny_config)]) == 2

    def test_vocab_mismatch(self, trained_run, tmp_path):
        other = tmp_path / "other.json"
        other.write_text(json.dumps({"data": {"vocab_size": 30}}))
        assert main(["eval", str(trained_run / "final.ckpt"),
                     "--config", str(other)]) == 2


class TestMetrics:
    def _tables(self, tiny_config, trained_run, tmp_path):
        out = tmp_path / "tables"
        for routing in ("router", "competition"):
            assert main(["eval", str(trained_run / "final.ckpt"),
                         "--config", str(tiny_config), "--routing", routing,
                         "--out", str(out), "--windows", "8"]) == 0
        return (out / "assignments-router.csv",
                out / "assignments-competition.csv")

    def test_ecr_and_level_learning(self, tiny_config, trained_run, tmp_path,
                                    capsys):
        a, b = self._tables(tiny_config, trained_run, tmp_path)
        assert main(["metrics", str(a), str(a), "--kind", "ecr"]) == 0
        assert "ecr: 0.0" in capsys.readouterr().out
        assert main(["metrics", str(a), str(a), "--kind", "level-learning"]) == 0
        assert "level_learning_norm: 1.0" in capsys.readouterr().out
        out_json = tmp_path / "m.json"
        assert main(["metrics", str(a), str(b), "--kind", "ecr",
                     "--out", str(out_json)]) == 0
        value = json.loads(out_json.read_text())["ecr"]
        assert 0.0 <= value <= 1.0

    def test_entropy_of_uniform_table(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        indices = np.stack([rng.permutation(4)[:2] for _ in range(4000)])
        indices = indices.reshape(-1, 1, 2)
        path = tmp_path / "uniform.csv"
        write_assignment_table(AssignmentTable(indices=indices, fingerprint="u"),
                               path)
        assert main(["metrics", str(path), "--kind", "entropy"]) == 0
        printed = capsys.readouterr().out
        value = float(printed.split("entropy_bits_mean: ")[1].split()[0])
        assert value == pytest.approx(2.0, abs=0.01)

    def test_two_table_kinds_require_second_table(self, tiny_config, trained_run,
                                                  tmp_path):
        a, _ = self._tables(tiny_config, trained_run, tmp_path)
        assert main(["metrics", str(a), "--kind", "ecr"]) == 2
        assert main(["metrics", str(a), "--kind", "level-learning"]) == 2

    def test_incompatible_fingerprints(self, tmp_path):
        idx = np.tile(np.array([0, 1], dtype=np.int64), (4, 1, 1))
        p1, p2 = tmp_path / "t1.csv", tmp_path / "t2.csv"
        write_assignment_table(AssignmentTable(indices=idx, fingerprint="x"), p1)
        write_assignment_table(AssignmentTable(indices=idx, fingerprint="y"), p2)
        assert main(["metrics", str(p1), str(p2), "--kind", "ecr"]) == 2

    def test_missing_table_file(self, tmp_path):
        assert main(["metrics", str(tmp_path / "no.csv"), "--kind",
                     "entropy"]) == 2


class TestRatelab:
    def test_dry_run_prints_plan(self, tmp_path, capsys):
        path = tmp_path / "r.json"
        path.write_text(json.dumps({
            "statlab": {"n_grid": [100, 200], "reps": 2}}))
        assert main(["ratelab", "--config", str(path), "--dry-run"]) == 0
        out = capsys.readouterr().out
        assert "jobs: 4" in out and "linear_exact_N2" in out

    def test_minimal_grid_completes(self, tmp_path):
        path = tmp_path / "r.json"
        path.write_text(json.dumps({
            "statlab": {"n_grid": [200, 400, 800], "reps": 2, "restarts": 2,
                        "method": "lbfgs", "tv_x_samples": 16}}))
        out = tmp_path / "rl"
        assert main(["ratelab", "--config", str(path), "--out", str(out)]) == 0
        rows = read_rate_csv(out / "rates.csv")
        assert len(rows) == 6
        slopes = json.loads((out / "slopes.json").read_text())
        assert "loss" in slopes["slopes"]
        assert slopes["failed_fits"] == 0

    def test_two_size_grid_reports_raw_slope(self, tmp_path, capsys):
        # too few sizes for per-n medians; the raw-row fit still gives a CI
        path = tmp_path / "r.json"
        path.write_text(json.dumps({
            "statlab": {"n_grid": [1000, 2000], "reps": 2, "restarts": 2,
                        "method": "lbfgs", "tv_x_samples": 16}}))
        out = tmp_path / "rl"
        assert main(["ratelab", "--config", str(path), "--out", str(out)]) == 0
        captured = capsys.readouterr().out
        assert "(raw rows)" in captured
        slopes = json.loads((out / "slopes.json").read_text())
        entry = slopes["slopes"]["loss"]
        assert entry["from_medians"] is False
        lo, hi = entry["ci95"]
        assert lo <= entry["slope"] <= hi


class TestGradcheck:
    def test_losses_scope_passes(self, capsys):
        assert main(["gradcheck", "--scope", "losses"]) == 0
        out = capsys.readouterr().out
        assert "max_rel_err" in out and "ok" in out

    def test_impossible_tol_reports_worst_offender(self, capsys):
        assert main(["gradcheck", "--scope", "losses", "--tol", "1e-18"]) == 1
        err = capsys.readouterr().err
        assert "worst offender" in err

    def test_unknown_scope_rejected_by_parser(self):
        with pytest.raises(SystemExit):
            main(["gradcheck", "--scope", "everything"])
