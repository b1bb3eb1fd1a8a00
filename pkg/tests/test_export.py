"""Tests for export functionality."""

import json
import struct
import zipfile
from io import BytesIO

import numpy as np
import pytest

from src.episode import run_episode
from src.errors import FormatError
from src.evidential import SemanticGrid
from src.export import (
    CHECKPOINT_MAGIC,
    GRID_HEADER,
    GRID_MAGIC,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    create_run_bundle,
    episode_filename,
    grid_from_bytes,
    grid_to_bytes,
    heatmap_csv,
    markdown_to_html,
    read_checkpoint,
    read_episodes,
    read_grid,
    read_table,
    safe_filename,
    table_to_csv,
    write_checkpoint,
    write_episodes,
    write_grid,
    write_table,
)
from src.metrics import info_gain_metrics
from src.policies import make_policy


def single_cell(masses):
    return SemanticGrid(np.asarray(masses, dtype=np.float64).reshape(1, 1, 6))


class TestGridFiles:
    """Tests for the binary grid format."""

    def test_layout(self):
        """Magic, header, class order, then float32 masses."""
        data = grid_to_bytes(single_cell((0.6, 0, 0, 0, 0, 0.4)))
        assert data.startswith(GRID_MAGIC)
        height, width, mpc, ego_row, ego_col, n_order = GRID_HEADER.unpack_from(data, len(GRID_MAGIC))
        assert (height, width, mpc, ego_row, ego_col) == (1, 1, 0.5, 0, 0)
        order = data[len(GRID_MAGIC) + GRID_HEADER.size:][:n_order]
        assert order == b"pedestrian,car,road_lines,road,other,omega"
        assert len(data) == len(GRID_MAGIC) + GRID_HEADER.size + n_order + 6 * 4

    def test_file_round_trip(self, tmp_path):
        """Written grids read back to float32 precision with their frame."""
        rng = np.random.default_rng(0)
        raw = rng.random((4, 6, 6))
        grid = SemanticGrid(raw / raw.sum(axis=-1, keepdims=True), 0.25, (3, 2))
        back = read_grid(write_grid(tmp_path / "g.grid", grid))
        assert back.same_frame(grid)
        np.testing.assert_allclose(back.masses, grid.masses, atol=1e-6)

    def test_bad_magic(self):
        """Foreign files are rejected."""
        with pytest.raises(FormatError):
            grid_from_bytes(b"PNG....")

    def test_truncated_body(self):
        """A body shorter than the header says is rejected."""
        data = grid_to_bytes(SemanticGrid.vacuous(2, 2))
        with pytest.raises(FormatError):
            grid_from_bytes(data[:-4])

    def test_other_class_order(self):
        """Files written with another class order are rejected."""
        data = grid_to_bytes(single_cell((0, 0, 0, 0, 0, 1)))
        swapped = data.replace(b"pedestrian,car", b"car,pedestrian")
        with pytest.raises(FormatError):
            grid_from_bytes(swapped)

    def test_missing_file(self, tmp_path):
        """Missing files raise FormatError."""
        with pytest.raises(FormatError):
            read_grid(tmp_path / "absent.grid")


class TestCheckpoints:
    """Tests for named-array checkpoints."""

    def test_round_trip(self, tmp_path):
        """Arrays and metadata come back exactly."""
        arrays = {"w": np.arange(6.0).reshape(2, 3), "b": np.array([0.5]), "s": np.array(2.0)}
        path = write_checkpoint(tmp_path / "p.ckpt", arrays, {"kind": "policy"})
        back, metadata = read_checkpoint(path)
        assert metadata == {"kind": "policy"}
        assert sorted(back) == ["b", "s", "w"]
        for name, value in arrays.items():
            np.testing.assert_array_equal(back[name], value)

    def test_deterministic_bytes(self):
        """Insertion order does not change the bytes."""
        a = checkpoint_to_bytes({"x": np.ones(2), "y": np.zeros(1)})
        b = checkpoint_to_bytes({"y": np.zeros(1), "x": np.ones(2)})
        assert a == b

    def test_truncated(self):
        """Cut-off checkpoints are rejected."""
        data = checkpoint_to_bytes({"x": np.ones(4)})
        with pytest.raises(FormatError):
            checkpoint_from_bytes(data[:-8])

    def test_trailing_bytes(self):
        """Extra bytes after the last array are rejected."""
        with pytest.raises(FormatError):
            checkpoint_from_bytes(checkpoint_to_bytes({"x": np.ones(1)}) + b"\0")

    def test_bad_magic(self):
        """Foreign files are rejected."""
        with pytest.raises(FormatError):
            checkpoint_from_bytes(b"NOTACKPT" + struct.pack("<I", 0))
        assert checkpoint_to_bytes({}).startswith(CHECKPOINT_MAGIC)


class TestTables:
    """Tests for CSV tables."""

    def test_column_order_and_float_format(self):
        """Columns follow the table kind; floats use nine significant digits."""
        csv_text = table_to_csv(
            "cem_trace",
            [{"best_return": 1 / 3, "generation": 0, "mean_return": 2.0, "elite_mean": -1.5}],
        )
        header, row = csv_text.strip().split("\n")
        assert header == "generation,mean_return,elite_mean,best_return"
        assert row == "0,2,-1.5,0.333333333"

    def test_unknown_kind(self):
        """Unknown table kinds are rejected."""
        with pytest.raises(FormatError):
            table_to_csv("nonsense", [])

    def test_read_back(self, tmp_path):
        """Written tables read back as string rows."""
        path = write_table(tmp_path / "t.csv", "loss_trace", [
            {"step": 0, "encoder": 1.0, "decoder": 2.0, "prediction": 3.0, "total": 6.0},
        ])
        rows = read_table(path, "loss_trace")
        assert rows == [{"step": "0", "encoder": "1", "decoder": "2", "prediction": "3", "total": "6"}]

    def test_missing_columns(self, tmp_path):
        """Tables lacking required columns are rejected."""
        path = tmp_path / "t.csv"
        path.write_text("step,total\n0,1\n")
        with pytest.raises(FormatError):
            read_table(path, "loss_trace")

    def test_heatmap(self):
        """One CSV line per grid row."""
        text = heatmap_csv(np.array([[0.2, 1.0], [0.5, 0.0]]))
        assert text == "0.2,1\n0.5,0\n"


class TestEpisodeDumps:
    """Tests for episode dump directories."""

    def test_round_trip_preserves_metrics(self, small_env, tmp_path):
        """Metrics from reloaded dumps equal metrics from the live run."""
        records = [run_episode(small_env, make_policy("random"), 3, s) for s in (0, 1)]
        write_episodes(tmp_path, records)
        back = read_episodes(tmp_path)
        assert sorted(back, key=lambda r: r.seed) == records
        assert info_gain_metrics(back) == info_gain_metrics(records)

    def test_file_names(self, small_env, tmp_path):
        """One CSV per episode named after policy and seed."""
        record = run_episode(small_env, make_policy("silent"), 2, 7)
        write_episodes(tmp_path, [record])
        assert (tmp_path / episode_filename("silent", 7)).exists()
        index = json.loads((tmp_path / "episodes.json").read_text())
        assert index[0]["policy"] == "silent" and index[0]["height"] == 16

    def test_missing_index(self, tmp_path):
        """Directories without an index are rejected."""
        with pytest.raises(FormatError):
            read_episodes(tmp_path)


class TestMarkdownToHtml:
    """Tests for markdown to HTML conversion."""

    def test_converts_basic_markdown(self):
        """Test basic markdown conversion."""
        html = markdown_to_html("# Hello World\n\nThis is a paragraph.")
        assert "<h1" in html
        assert "Hello World" in html
        assert "<p>" in html

    def test_includes_styling(self):
        """Test that HTML includes CSS styling."""
        html = markdown_to_html("# Test")
        assert "<style>" in html
        assert "font-family" in html

    def test_handles_tables(self):
        """Test table conversion."""
        html = markdown_to_html("| A | B |\n|---|---|\n| 1 | 2 |")
        assert "<table>" in html


class TestCreateRunBundle:
    """Tests for zip bundle creation."""

    def test_contents(self):
        """Bundle holds the report, its HTML, data files and metadata."""
        data = create_run_bundle("# Report", {"metrics.csv": "a,b\n"}, {"seed": 3}, title="run")
        with zipfile.ZipFile(BytesIO(data)) as zf:
            names = zf.namelist()
            assert names == sorted(names)
            assert {"run.md", "run.html", "data/metrics.csv", "metadata.json"} <= set(names)
            metadata = json.loads(zf.read("metadata.json"))
        assert metadata["seed"] == 3
        assert "data/metrics.csv" in metadata["files_included"]

    def test_byte_identical(self):
        """Identical inputs give identical bytes."""
        assert create_run_bundle("# R", {"x.csv": "1"}) == create_run_bundle("# R", {"x.csv": "1"})


class TestSafeFilename:
    """Tests for filename generation."""

    def test_simple_title(self):
        assert safe_filename("Greedy Run") == "greedy-run"

    def test_removes_special_characters(self):
        assert safe_filename("Run: #1 (eta=0.3)") == "run-1-eta03"

    def test_extension(self):
        assert safe_filename("metrics", ".csv") == "metrics.csv"

    def test_empty_title(self):
        assert safe_filename("!!!") == "untitled"
