"""Evaluation metrics: information gain, request size, mass score and change accuracy."""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from src.config import GAIN_NORMALIZATIONS
from src.episode import EpisodeRecord
from src.errors import ParameterError
from src.evidential import CLASSES, SemanticGrid

logger = logging.getLogger(__name__)

# Class groups reported for information gain; 'other' carries no reward and is left out.
GROUPS = {
    "P": ("pedestrian",),
    "C": ("car",),
    "R": ("road_lines", "road"),
}
ROAD_CHANNELS = (CLASSES.index("road_lines"), CLASSES.index("road"))
BLUR_WIDTHS = {"none": 0, "gaussian5": 5, "gaussian11": 11}
ONE_HOT_TOLERANCE = 1e-9


@dataclass(frozen=True)
class MetricsReport:
    policy: str
    scenario: str
    episodes: int
    info_gain_pct: dict
    request_size_pct: float
    mean_reward: float
    mass_score: Optional[float] = None
    change_accuracy: dict = field(default_factory=dict)  # blur -> (+pct, -pct)

    def __post_init__(self):
        for name, value in [*self.info_gain_pct.items(), ("request_size", self.request_size_pct)]:
            if not 0.0 <= value <= 100.0 + 1e-9:
                raise ParameterError(f"{name} percentage {value} outside [0, 100]")

    def to_row(self) -> dict:
        return {
            "policy": self.policy,
            "scenario": self.scenario,
            "episodes": self.episodes,
            "gain_p": self.info_gain_pct["P"],
            "gain_c": self.info_gain_pct["C"],
            "gain_r": self.info_gain_pct["R"],
            "request_size": self.request_size_pct,
            "mean_reward": self.mean_reward,
        }

    def to_markdown(self) -> str:
        lines = [
            f"## {self.policy} on {self.scenario} ({self.episodes} episodes)",
            "",
            "| Metric | Value |",
            "|---|---|",
        ]
        for group, value in self.info_gain_pct.items():
            lines.append(f"| Information gain {group} | {value:.1f}% |")
        lines.append(f"| Request size | {self.request_size_pct:.1f}% |")
        lines.append(f"| Mean reward | {self.mean_reward:.3f} |")
        if self.mass_score is not None:
            lines.append(f"| Mass score | {self.mass_score:.4f} |")
        for blur, (pos, neg) in self.change_accuracy.items():
            lines.append(f"| Change accuracy ({blur}) | +{pos:.1f}% / -{neg:.1f}% |")
        return "\n".join(lines)


def _group_totals(values: tuple) -> dict:
    return {g: sum(values[CLASSES.index(c)] for c in members) for g, members in GROUPS.items()}


def _gain_pct(gained: float, achievable: float) -> float:
    if achievable <= 0.0:
        return 0.0
    return min(100.0, 100.0 * gained / achievable)


def info_gain_metrics(records: list[EpisodeRecord], normalization: str = "pooled") -> MetricsReport:
    """
    Gained over achievable class mass per group, plus request size and mean reward.

    "pooled" divides summed gains by summed achievable mass; "per_step" averages
    the per-step ratios over steps with something to gain. A group with nothing
    achievable reports 0.
    """
    if not records:
        raise ParameterError("metrics need at least one episode")
    if normalization not in GAIN_NORMALIZATIONS:
        raise ParameterError(f"unknown gain normalization '{normalization}'")
    records = sorted(records, key=lambda r: (r.policy, r.scenario, r.seed))
    steps = [s for r in records for s in r.steps]
    if not steps:
        raise ParameterError("metrics need at least one step")

    gained = {g: 0.0 for g in GROUPS}
    achievable = {g: 0.0 for g in GROUPS}
    ratios = {g: [] for g in GROUPS}
    for s in steps:
        g_step, a_step = _group_totals(s.gained), _group_totals(s.achievable)
        for g in GROUPS:
            gained[g] += g_step[g]
            achievable[g] += a_step[g]
            if a_step[g] > 0.0:
                ratios[g].append(_gain_pct(g_step[g], a_step[g]))

    for g in GROUPS:
        if achievable[g] <= 0.0:
            logger.warning("Group %s has no achievable mass over %d steps", g, len(steps))
    if normalization == "pooled":
        gain_pct = {g: _gain_pct(gained[g], achievable[g]) for g in GROUPS}
    else:
        gain_pct = {g: float(np.mean(ratios[g])) if ratios[g] else 0.0 for g in GROUPS}

    area = records[0].height * records[0].width
    request_size = 100.0 * float(np.mean([s.request_cells for s in steps])) / area
    policies = sorted({r.policy for r in records})
    scenarios = sorted({r.scenario for r in records})
    return MetricsReport(
        policy="+".join(policies),
        scenario="+".join(scenarios),
        episodes=len(records),
        info_gain_pct=gain_pct,
        request_size_pct=request_size,
        mean_reward=float(np.mean([s.reward for s in steps])),
    )


def mass_score(true_binary: SemanticGrid, inferred: SemanticGrid) -> float:
    """Mean mass the inferred grid gives to the true class of each cell."""
    if true_binary.shape != inferred.shape:
        raise ParameterError(
            "grids must share dimensions",
            truth=list(true_binary.shape),
            inferred=list(inferred.shape),
        )
    truth = true_binary.masses
    is_binary = np.all((np.abs(truth) < ONE_HOT_TOLERANCE) | (np.abs(truth - 1.0) < ONE_HOT_TOLERANCE))
    if not is_binary or np.any(np.abs(truth.sum(axis=-1) - 1.0) > ONE_HOT_TOLERANCE):
        raise ParameterError("true grid must be one-hot in every cell")
    return float(np.mean(np.sum(truth * inferred.masses, axis=-1)))


def road_mass(grid) -> np.ndarray:
    """Road plus road-line mass of a grid."""
    masses = grid.masses if isinstance(grid, SemanticGrid) else np.asarray(grid)
    return masses[..., ROAD_CHANNELS[0]] + masses[..., ROAD_CHANNELS[1]]


def blur(changes: np.ndarray, kind: str) -> np.ndarray:
    """Gaussian blur over the two grid axes with support equal to the kernel width."""
    if kind not in BLUR_WIDTHS:
        raise ParameterError(f"unknown blur '{kind}'", known=sorted(BLUR_WIDTHS))
    width = BLUR_WIDTHS[kind]
    if width == 0:
        return changes
    sigma = width / 6.0
    radius = (width - 1) // 2
    spatial = (0,) * (changes.ndim - 2) + (sigma, sigma)
    return gaussian_filter(changes, sigma=spatial, mode="constant", truncate=radius / sigma)


def _signed_accuracy(true_part: np.ndarray, pred_part: np.ndarray, blurred_part: np.ndarray) -> float:
    total = true_part.sum()
    overlap = (true_part * blurred_part).sum()
    if total <= 0.0 or overlap <= 0.0:
        return math.nan
    scaled = blurred_part * (total / overlap)
    return float(np.clip(100.0 * (pred_part * scaled).sum() / total, 0.0, 100.0))


def change_accuracy(true_seq, pred_seq, kind: str = "none") -> tuple:
    """
    Share of true road-mass changes the prediction reproduces, per sign.

    Sequences are (T, H, W) road-mass arrays or lists of grids. The blurred true
    changes are rescaled so that their overlap with the raw true changes equals
    the raw total. NaN marks a sign with no true change.
    """
    true_arr, pred_arr = _road_array(true_seq), _road_array(pred_seq)
    if true_arr.shape != pred_arr.shape:
        raise ParameterError("true and predicted sequences differ in shape")
    if true_arr.shape[0] < 2:
        raise ParameterError("change accuracy needs sequences of at least two steps")
    true_diff = np.diff(true_arr, axis=0)
    pred_diff = np.diff(pred_arr, axis=0)
    smooth = blur(true_diff, kind)
    positive = _signed_accuracy(
        np.maximum(0.0, true_diff), np.maximum(0.0, pred_diff), np.maximum(0.0, smooth)
    )
    negative = _signed_accuracy(
        np.maximum(0.0, -true_diff), np.maximum(0.0, -pred_diff), np.maximum(0.0, -smooth)
    )
    return positive, negative


def _road_array(seq) -> np.ndarray:
    if len(seq) > 0 and isinstance(seq[0], SemanticGrid):
        return np.stack([road_mass(g) for g in seq])
    return np.asarray(seq, dtype=np.float64)
