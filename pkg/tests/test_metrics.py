"""Tests for the evaluation metrics."""

import math

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from src.episode import EpisodeRecord, StepRecord, run_episode
from src.errors import ParameterError
from src.evidential import SemanticGrid
from src.metrics import (
    GROUPS,
    MetricsReport,
    blur,
    change_accuracy,
    info_gain_metrics,
    mass_score,
    road_mass,
)
from src.policies import make_policy


def make_record(policy, seed, steps):
    return EpisodeRecord(seed, "crossing", policy, tuple(steps), height=4, width=5)


def step(t, gained, achievable, cells=0, reward=0.0):
    return StepRecord(
        t=t,
        action=(0.0, 0.0, 0.0, 0.0),
        reward=reward,
        request_cells=cells,
        gained=gained,
        achievable=achievable,
        omega_before=1.0,
        omega_after=1.0,
    )


class TestInfoGainMetrics:
    """Test gain percentages and request size."""

    def test_broadcast_scores_full(self, small_env):
        """Broadcast gains everything and requests everything."""
        records = [run_episode(small_env, make_policy("broadcast"), 3, s) for s in (0, 1)]
        report = info_gain_metrics(records)
        steps = [s for r in records for s in r.steps]
        for group, value in report.info_gain_pct.items():
            if group == "R" or any(s.achievable[0 if group == "P" else 1] > 0 for s in steps):
                assert value == pytest.approx(100.0)
            else:
                assert value == 0.0
        assert report.request_size_pct == pytest.approx(100.0)

    def test_silent_scores_nothing(self, small_env):
        """Silent gains nothing, requests nothing, pays the penalty."""
        records = [run_episode(small_env, make_policy("silent"), 3, s) for s in (0, 1)]
        report = info_gain_metrics(records)
        assert report.info_gain_pct == {"P": 0.0, "C": 0.0, "R": 0.0}
        assert report.request_size_pct == 0.0
        assert report.mean_reward == small_env.params.no_coop_penalty

    def test_pooled_ratio_of_sums(self):
        """Pooled normalization divides summed gains by summed achievable mass."""
        record = make_record(
            "random",
            0,
            [
                step(0, (1.0, 0.0, 0.5, 0.5, 0.0), (2.0, 1.0, 1.0, 1.0, 1.0), cells=10),
                step(1, (0.0, 1.0, 0.0, 0.0, 0.0), (2.0, 1.0, 1.0, 1.0, 1.0), cells=0),
            ],
        )
        report = info_gain_metrics([record])
        assert report.info_gain_pct["P"] == pytest.approx(25.0)
        assert report.info_gain_pct["C"] == pytest.approx(50.0)
        assert report.info_gain_pct["R"] == pytest.approx(25.0)
        assert report.request_size_pct == pytest.approx(100.0 * 5 / 20)

    def test_per_step_mean_of_ratios(self):
        """Per-step normalization averages step ratios."""
        record = make_record(
            "random",
            0,
            [
                step(0, (1.0, 0, 0, 0, 0), (1.0, 1, 1, 1, 0)),
                step(1, (0.0, 0, 0, 0, 0), (3.0, 1, 1, 1, 0)),
            ],
        )
        pooled = info_gain_metrics([record], "pooled")
        per_step = info_gain_metrics([record], "per_step")
        assert pooled.info_gain_pct["P"] == pytest.approx(25.0)
        assert per_step.info_gain_pct["P"] == pytest.approx(50.0)

    def test_nothing_achievable_reports_zero(self):
        """A group with no achievable mass reports 0."""
        record = make_record("silent", 0, [step(0, (0.0,) * 5, (0.0, 1.0, 1.0, 1.0, 0.0))])
        assert info_gain_metrics([record]).info_gain_pct["P"] == 0.0

    def test_permutation_invariant(self, small_env):
        """Episode order does not change the report."""
        records = [run_episode(small_env, make_policy("random"), 3, s) for s in (0, 1, 2)]
        assert info_gain_metrics(records) == info_gain_metrics(list(reversed(records)))

    def test_rejects_empty_and_unknown(self):
        """Empty input and unknown normalizations are errors."""
        with pytest.raises(ParameterError):
            info_gain_metrics([])
        record = make_record("silent", 0, [step(0, (0.0,) * 5, (0.0,) * 5)])
        with pytest.raises(ParameterError):
            info_gain_metrics([record], "per_episode")

    def test_report_validates_percentages(self):
        """Percentages outside [0, 100] are rejected."""
        with pytest.raises(ParameterError):
            MetricsReport("p", "s", 1, {g: 120.0 for g in GROUPS}, 0.0, 0.0)

    def test_report_row_and_markdown(self):
        """Rows follow the metrics columns; markdown lists every metric."""
        report = MetricsReport(
            "greedy", "crossing", 2, {"P": 10.0, "C": 20.0, "R": 30.0}, 5.0, -1.5,
            mass_score=0.5, change_accuracy={"none": (40.0, 60.0)},
        )
        row = report.to_row()
        assert (row["gain_p"], row["gain_c"], row["gain_r"]) == (10.0, 20.0, 30.0)
        md = report.to_markdown()
        assert "Information gain C | 20.0%" in md
        assert "Mass score | 0.5000" in md
        assert "+40.0% / -60.0%" in md


class TestMassScore:
    """Test the mean mass on the true class."""

    def test_truth_scores_one(self):
        """A one-hot grid scores 1 against itself."""
        truth = SemanticGrid(np.eye(6)[np.random.default_rng(0).integers(0, 6, (4, 5))])
        assert mass_score(truth, truth) == pytest.approx(1.0)

    def test_uniform_scores_one_sixth(self):
        """Uniform masses give 1/6."""
        truth = SemanticGrid(np.eye(6)[np.zeros((4, 5), dtype=int)])
        uniform = SemanticGrid(np.full((4, 5, 6), 1 / 6))
        assert mass_score(truth, uniform) == pytest.approx(1 / 6)

    def test_vacuous_scores_omega_share(self):
        """A vacuous prediction scores the share of omega-labeled cells."""
        labels = np.zeros((4, 5), dtype=int)
        labels[:2] = 5
        truth = SemanticGrid(np.eye(6)[labels])
        assert mass_score(truth, SemanticGrid.vacuous(4, 5)) == pytest.approx(0.5)

    def test_binarized_grid_is_valid_truth(self):
        """binarize output is accepted as truth."""
        rng = np.random.default_rng(1)
        raw = rng.random((4, 5, 6))
        grid = SemanticGrid(raw / raw.sum(axis=-1, keepdims=True))
        assert 0.0 < mass_score(grid.binarize(), grid) <= 1.0

    def test_rejects_soft_truth(self):
        """Non-one-hot truth is an error."""
        with pytest.raises(ParameterError):
            mass_score(SemanticGrid.vacuous(4, 5).with_masses(np.full((4, 5, 6), 1 / 6)),
                       SemanticGrid.vacuous(4, 5))

    def test_rejects_shape_mismatch(self):
        """Grids must share dimensions."""
        truth = SemanticGrid(np.eye(6)[np.zeros((4, 5), dtype=int)])
        with pytest.raises(ParameterError):
            mass_score(truth, SemanticGrid.vacuous(4, 6))


class TestChangeAccuracy:
    """Test the road-change accuracy."""

    @pytest.fixture
    def sequence(self):
        rng = np.random.default_rng(2)
        return rng.random((4, 12, 12))

    def test_perfect_prediction(self, sequence):
        """Predicting the truth reproduces all changes."""
        assert change_accuracy(sequence, sequence) == pytest.approx((100.0, 100.0))

    def test_static_prediction(self, sequence):
        """A prediction with no change scores zero."""
        frozen = np.repeat(sequence[:1], 4, axis=0)
        assert change_accuracy(sequence, frozen) == (0.0, 0.0)

    def test_no_true_change_is_nan(self):
        """A sign that never occurs in the truth reports NaN."""
        true_seq = np.zeros((2, 5, 5))
        true_seq[1, 2, 2] = 1.0
        pos, neg = change_accuracy(true_seq, true_seq)
        assert pos == pytest.approx(100.0)
        assert math.isnan(neg)

    def test_shifted_change_under_blur(self):
        """A one-cell miss scores 0 raw and the hand-computed overlap when blurred."""
        true_seq = np.zeros((2, 15, 15))
        pred_seq = np.zeros((2, 15, 15))
        true_seq[1, 7, 7] = 1.0
        pred_seq[1, 7, 8] = 1.0
        assert change_accuracy(true_seq, pred_seq, "none")[0] == 0.0
        kernel = gaussian_filter(true_seq[1] - true_seq[0], 11 / 6, mode="constant", truncate=5 / (11 / 6))
        expected = 100.0 * kernel[7, 8] / kernel[7, 7]
        pos, _ = change_accuracy(true_seq, pred_seq, "gaussian11")
        assert 0.0 < pos < 100.0
        assert pos == pytest.approx(expected)

    def test_accepts_grids(self):
        """Grid sequences are reduced to road mass."""
        grids = [SemanticGrid.vacuous(4, 5), SemanticGrid(np.eye(6)[np.full((4, 5), 3)])]
        pos, _ = change_accuracy(grids, grids)
        assert pos == pytest.approx(100.0)
        np.testing.assert_allclose(road_mass(grids[1]), 1.0)

    def test_errors(self, sequence):
        """Short sequences, mismatched shapes and unknown blurs are rejected."""
        with pytest.raises(ParameterError):
            change_accuracy(sequence[:1], sequence[:1])
        with pytest.raises(ParameterError):
            change_accuracy(sequence, sequence[:3])
        with pytest.raises(ParameterError):
            blur(sequence, "box3")

    def test_blur_keeps_time_axis_separate(self, sequence):
        """Blurring never mixes time steps."""
        out = blur(sequence, "gaussian5")
        single = blur(sequence[1:2], "gaussian5")
        np.testing.assert_allclose(out[1], single[0])
