"""Tests for the command-line entry points."""

import csv
import json

import numpy as np
import pytest

import app
from src.evidential import SemanticGrid
from src.export import read_checkpoint, read_grid, write_grid

SMALL = {
    "scenario": {
        "grid_height": 16, "grid_width": 24, "n_cars": 2, "n_parked_cars": 1, "n_pedestrians": 3,
    },
    "harness": {"episode_steps": 3, "seeds": [0, 1]},
    "cem": {"population": 2, "generations": 1, "episodes_per_candidate": 1, "episode_steps": 2},
}


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def run(*argv):
    return app.main(["--log-level", "WARNING", *[str(a) for a in argv]])


def envelope(capsys) -> dict:
    err = capsys.readouterr().err
    return json.loads([line for line in err.splitlines() if line.startswith("{")][-1])


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def single_cell(masses):
    return SemanticGrid(np.asarray(masses, dtype=np.float64).reshape(1, 1, 6))


class TestFuse:
    """Test the fuse command."""

    def test_worked_example(self, tmp_path):
        """Two single-cell files fuse to the worked result."""
        a = write_grid(tmp_path / "a.grid", single_cell((0.6, 0, 0, 0, 0, 0.4)))
        b = write_grid(tmp_path / "b.grid", single_cell((0, 0.5, 0, 0, 0, 0.5)))
        out = tmp_path / "ab.grid"
        assert run("fuse", a, b, "--output", out) == 0
        np.testing.assert_allclose(
            read_grid(out).masses[0, 0], (0.48, 0.32, 0, 0, 0, 0.2), atol=1e-6
        )

    def test_frame_mismatch_is_reported(self, tmp_path, capsys):
        """Grids of different sizes fail with a parameter_error envelope."""
        a = write_grid(tmp_path / "a.grid", SemanticGrid.vacuous(2, 2))
        b = write_grid(tmp_path / "b.grid", SemanticGrid.vacuous(2, 3))
        assert run("--out-dir", tmp_path, "fuse", a, b) == 2
        error = envelope(capsys)
        assert error["code"] == "parameter_error"
        assert set(error) == {"code", "message", "context"}

    def test_missing_file(self, tmp_path, capsys):
        """Missing inputs fail with a format_error envelope."""
        assert run("--out-dir", tmp_path, "fuse", tmp_path / "x", tmp_path / "y") == 2
        assert envelope(capsys)["code"] == "format_error"


class TestFilterDump:
    """Test the filter-dump command."""

    def test_default_filter(self, tmp_path):
        """80x120 heatmap with the closed-form values at the landmarks."""
        assert run("--out-dir", tmp_path, "filter-dump") == 0
        values = np.loadtxt(tmp_path / "spatial_filter.csv", delimiter=",")
        assert values.shape == (80, 120)
        assert values[0, 60] == pytest.approx(0.2)
        assert values[79, 60] == pytest.approx(1.0)
        assert values[79, 0] == pytest.approx(0.0, abs=1e-9)

    def test_deterministic(self, tmp_path):
        """Two dumps are byte-identical."""
        run("--out-dir", tmp_path / "a", "filter-dump")
        run("--out-dir", tmp_path / "b", "filter-dump")
        first = (tmp_path / "a" / "spatial_filter.csv").read_bytes()
        assert first == (tmp_path / "b" / "spatial_filter.csv").read_bytes()


class TestSimulateEvaluate:
    """Test simulate and evaluate."""

    def test_simulate_writes_dumps_and_metrics(self, tmp_path, config_path):
        """Episode CSVs, an index and a metrics table are written."""
        out = tmp_path / "sim"
        code = run("--config", config_path, "--out-dir", out, "simulate",
                   "--policies", "broadcast", "silent")
        assert code == 0
        index = json.loads((out / "episodes" / "episodes.json").read_text())
        assert len(index) == 4
        rows = {r["policy"]: r for r in read_rows(out / "metrics.csv")}
        assert float(rows["broadcast"]["request_size"]) == pytest.approx(100.0)
        assert float(rows["silent"]["gain_r"]) == 0.0
        assert float(rows["silent"]["mean_reward"]) == -15.0

    def test_evaluate_dumps_matches_live_run(self, tmp_path, config_path):
        """Metrics from reloaded dumps equal metrics from a live run, byte for byte."""
        run("--config", config_path, "--out-dir", tmp_path / "sim", "simulate",
            "--policies", "random", "greedy")
        run("--config", config_path, "--out-dir", tmp_path / "dumps", "evaluate",
            "--dumps", tmp_path / "sim" / "episodes")
        run("--config", config_path, "--out-dir", tmp_path / "live", "evaluate",
            "--policies", "random", "greedy")
        dumped = (tmp_path / "dumps" / "metrics.csv").read_bytes()
        assert dumped == (tmp_path / "live" / "metrics.csv").read_bytes()
        assert dumped == (tmp_path / "sim" / "metrics.csv").read_bytes()

    def test_repeat_runs_identical(self, tmp_path, config_path):
        """Same seed and config, same bytes."""
        for name in ("a", "b"):
            run("--config", config_path, "--out-dir", tmp_path / name, "simulate",
                "--policies", "random", "--episodes", "2", "--seed", "5")
        for rel in ("metrics.csv", "episodes/episode_random_5.csv", "episodes/episode_random_6.csv"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_evaluate_writes_reports(self, tmp_path, config_path):
        """JSON, markdown, HTML and the optional bundle are written."""
        out = tmp_path / "eval"
        code = run("--config", config_path, "--out-dir", out, "evaluate",
                   "--policies", "broadcast", "--bundle", "--eta", "0.5")
        assert code == 0
        rows = json.loads((out / "metrics.json").read_text())
        assert rows[0]["policy"] == "broadcast"
        assert "Information gain R" in (out / "report.md").read_text()
        assert "<table>" in (out / "report.html").read_text()
        assert (out / "run_bundle.zip").stat().st_size > 0

    def test_configured_policy_is_the_default(self, tmp_path):
        """Without --policies both commands run the policy named in the config."""
        path = tmp_path / "silent.json"
        path.write_text(json.dumps({**SMALL, "policy": {"name": "silent"}}))
        run("--config", path, "--out-dir", tmp_path / "sim", "simulate")
        run("--config", path, "--out-dir", tmp_path / "eval", "evaluate")
        for out in ("sim", "eval"):
            assert [r["policy"] for r in read_rows(tmp_path / out / "metrics.csv")] == ["silent"]

    def test_unknown_configured_policy(self, tmp_path, capsys):
        """A configured policy name that is not registered fails cleanly."""
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({**SMALL, "policy": {"name": "telepathy"}}))
        assert run("--config", path, "--out-dir", tmp_path, "evaluate") == 2
        assert envelope(capsys)["code"] == "parameter_error"

    def test_dump_grids(self, tmp_path, config_path):
        """Grid files and a motion table are written for the first seed."""
        out = tmp_path / "sim"
        run("--config", config_path, "--out-dir", out, "simulate",
            "--policies", "silent", "--dump-grids")
        grid = read_grid(out / "grids" / "silent_0_002_knowledge.grid")
        assert grid.shape == (16, 24)
        motion = read_rows(out / "grids" / "silent_0_motion.csv")
        assert [r["t"] for r in motion] == ["0", "1", "2"]


class TestTraining:
    """Test train-cem, train-kernel and loss-check."""

    def test_train_cem_then_simulate(self, tmp_path, config_path):
        """A trained checkpoint drives the parametric policy."""
        out = tmp_path / "cem"
        assert run("--config", config_path, "--out-dir", out, "train-cem") == 0
        arrays, metadata = read_checkpoint(out / "policy.ckpt")
        assert metadata["features"] == "grid"
        assert arrays["weights"].shape == (5, 7)
        assert len(read_rows(out / "cem_trace.csv")) == 1
        code = run("--config", config_path, "--out-dir", tmp_path / "sim", "simulate",
                   "--policies", "parametric", "--checkpoint", out / "policy.ckpt")
        assert code == 0

    def test_train_cem_seed_comes_from_config_unless_given(self, tmp_path):
        """--seed overrides the cem seed only when it is passed."""
        path = tmp_path / "seeded.json"
        path.write_text(json.dumps({**SMALL, "cem": {**SMALL["cem"], "seed": 3}}))
        run("--config", path, "--out-dir", tmp_path / "config", "train-cem")
        run("--config", path, "--out-dir", tmp_path / "three", "--seed", "3", "train-cem")
        run("--config", path, "--out-dir", tmp_path / "zero", "--seed", "0", "train-cem")
        weights = {
            name: read_checkpoint(tmp_path / name / "policy.ckpt")[0]["weights"]
            for name in ("config", "three", "zero")
        }
        np.testing.assert_array_equal(weights["config"], weights["three"])
        assert not np.array_equal(weights["config"], weights["zero"])

    def test_parametric_without_checkpoint(self, tmp_path, config_path, capsys):
        """The parametric policy cannot run untrained."""
        code = run("--config", config_path, "--out-dir", tmp_path, "simulate",
                   "--policies", "parametric")
        assert code == 2
        assert envelope(capsys)["code"] == "parameter_error"

    def test_train_kernel_then_belief_features(self, tmp_path, config_path):
        """A trained recognition model feeds belief features to CEM."""
        out = tmp_path / "kernel"
        code = run("--config", config_path, "--out-dir", out, "train-kernel",
                   "--episodes", "2", "--steps", "3", "--train-steps", "2")
        assert code == 0
        assert len(read_rows(out / "loss_trace.csv")) == 2
        code = run("--config", config_path, "--out-dir", tmp_path / "cem", "train-cem",
                   "--features", "belief", "--recognition", out / "recognition.ckpt")
        assert code == 0
        _, metadata = read_checkpoint(tmp_path / "cem" / "policy.ckpt")
        assert metadata["features"] == "belief"

    def test_train_kernel_uses_configured_class_weights(self, tmp_path):
        """The kernel section's class weights change the class-weighted loss."""
        totals = {}
        for name, weights in (("default", None), ("flat", [1.0] * 6)):
            kernel = {"y_likelihood": "weighted_ce"}
            if weights is not None:
                kernel["class_weights"] = weights
            path = tmp_path / f"{name}.json"
            path.write_text(json.dumps({**SMALL, "kernel": kernel}))
            code = run("--config", path, "--out-dir", tmp_path / name, "train-kernel",
                       "--episodes", "1", "--steps", "3", "--train-steps", "1")
            assert code == 0
            totals[name] = float(read_rows(tmp_path / name / "loss_trace.csv")[0]["total"])
        assert totals["default"] != pytest.approx(totals["flat"], rel=1e-6)

    def test_loss_check(self, tmp_path, capsys):
        """Prefix losses stay above the exact negative log-likelihood."""
        code = run("--out-dir", tmp_path, "loss-check", "--systems", "2", "--samples", "2000",
                   "--trace")
        assert code == 0
        out = capsys.readouterr().out
        assert out.count(" ok") == 4
        assert len(read_rows(tmp_path / "loss_check.csv")) == 4


class TestErrors:
    """Test the error envelope and exit codes."""

    def test_missing_config(self, tmp_path, capsys):
        """An absent config file is a config_error."""
        assert run("--config", tmp_path / "none.json", "filter-dump") == 2
        assert envelope(capsys)["code"] == "config_error"

    def test_unexpected_failure(self, tmp_path, capsys, monkeypatch):
        """Anything else exits 1 with internal_error."""
        def boom(*args):
            raise RuntimeError("boom")

        monkeypatch.setattr(app, "fuse_grids", boom)
        a = write_grid(tmp_path / "a.grid", SemanticGrid.vacuous(2, 2))
        assert run("fuse", a, a, "--output", tmp_path / "o.grid") == 1
        error = envelope(capsys)
        assert error["code"] == "internal_error"
        assert error["context"]["type"] == "RuntimeError"
