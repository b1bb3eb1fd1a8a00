"""Pseudo-Bayesian mass functions over the semantic frame, grids of them, and their fusion.

Every mass vector has six entries in the fixed class order
(pedestrian, car, road_lines, road, other, omega). Array kernels work on the
trailing axis so the same code serves single cells and whole grids.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from src.errors import ParameterError

logger = logging.getLogger(__name__)

CLASSES = ("pedestrian", "car", "road_lines", "road", "other")
CLASS_ORDER = CLASSES + ("omega",)
N_CLASSES = len(CLASSES)
N_CHANNELS = N_CLASSES + 1
OMEGA = N_CLASSES  # index of the ignorance channel

PEDESTRIAN, CAR, ROAD_LINES, ROAD, OTHER = range(N_CLASSES)

DRIFT_TOLERANCE = 1e-6  # largest sum drift repaired on construction
EXACT_TOLERANCE = 1e-12  # below this drift inputs are kept untouched

DEFAULT_HEIGHT = 80
DEFAULT_WIDTH = 120
DEFAULT_METERS_PER_CELL = 0.5


def _normalize_masses(masses: np.ndarray) -> np.ndarray:
    """Validate a (..., 6) mass array and repair small drift.

    Raises ParameterError when a mass is clearly negative or the sum is off by
    more than DRIFT_TOLERANCE.
    """
    arr = np.asarray(masses, dtype=np.float64)
    if arr.ndim == 0 or arr.shape[-1] != N_CHANNELS:
        raise ParameterError(
            f"mass arrays must end with {N_CHANNELS} channels, got shape {arr.shape}",
            shape=list(arr.shape),
        )
    if not np.all(np.isfinite(arr)):
        raise ParameterError("masses must be finite")
    if np.any(arr < -DRIFT_TOLERANCE):
        raise ParameterError("masses must be nonnegative", min_mass=float(arr.min()))
    sums = arr.sum(axis=-1)
    drift = np.abs(sums - 1.0)
    if np.any(drift > DRIFT_TOLERANCE):
        raise ParameterError(
            "masses must sum to 1", max_drift=float(drift.max())
        )
    if np.any(arr < 0.0) or np.any(drift > EXACT_TOLERANCE):
        arr = np.clip(arr, 0.0, None)
        arr = arr / arr.sum(axis=-1, keepdims=True)
    return arr


@dataclass(frozen=True)
class MassFunction:
    """Masses on the five singletons plus omega for one cell."""

    masses: tuple

    def __post_init__(self):
        arr = _normalize_masses(np.asarray(self.masses, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "masses", tuple(float(v) for v in arr))

    @property
    def omega(self) -> float:
        return self.masses[OMEGA]

    @property
    def singletons(self) -> tuple:
        return self.masses[:N_CLASSES]

    def as_array(self) -> np.ndarray:
        return np.array(self.masses, dtype=np.float64)

    def to_dict(self) -> dict:
        return dict(zip(CLASS_ORDER, self.masses))


@dataclass(frozen=True)
class ContourFunction:
    """Plausibility of each singleton class."""

    plausibilities: tuple

    def __post_init__(self):
        values = tuple(float(v) for v in self.plausibilities)
        if len(values) != N_CLASSES:
            raise ParameterError(f"contour needs {N_CLASSES} values, got {len(values)}")
        if any(v < -EXACT_TOLERANCE or v > 1.0 + EXACT_TOLERANCE for v in values):
            raise ParameterError("plausibilities must lie in [0, 1]")
        object.__setattr__(self, "plausibilities", values)


# --- array kernels -----------------------------------------------------------


def discount_array(masses: np.ndarray, gamma: float) -> np.ndarray:
    """Move a (1 - gamma) share of every singleton mass onto omega."""
    if not 0.0 <= gamma <= 1.0:
        raise ParameterError(f"gamma must be in [0, 1], got {gamma}", gamma=gamma)
    out = np.empty_like(masses)
    out[..., :N_CLASSES] = masses[..., :N_CLASSES] * gamma
    out[..., OMEGA] = 1.0 - gamma * (1.0 - masses[..., OMEGA])
    return out


def fuse_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Conjunctive fusion of pseudo-Bayesian masses, cell by cell.

    The ignorance masses multiply. The singleton products of contours minus the
    new ignorance are rescaled to fill the remaining mass; under total conflict
    the remainder is spread evenly over the singletons.
    """
    a_omega = a[..., OMEGA:]
    b_omega = b[..., OMEGA:]
    omega = a_omega * b_omega
    a_s = a[..., :N_CLASSES]
    b_s = b[..., :N_CLASSES]
    # (a_k + a_O)(b_k + b_O) - a_O b_O, expanded so it stays nonnegative
    raw = a_s * b_s + a_s * b_omega + a_omega * b_s
    total = raw.sum(axis=-1, keepdims=True)
    target = 1.0 - omega
    conflict = total <= 0.0
    safe_total = np.where(conflict, 1.0, total)
    singletons = np.where(conflict, target / N_CLASSES, raw * (target / safe_total))
    return np.concatenate([singletons, omega], axis=-1)


def vacuous_array(shape: tuple) -> np.ndarray:
    out = np.zeros(tuple(shape) + (N_CHANNELS,), dtype=np.float64)
    out[..., OMEGA] = 1.0
    return out


# --- single-cell operations --------------------------------------------------


def vacuous() -> MassFunction:
    """Full ignorance, the neutral element of fusion."""
    return MassFunction((0.0, 0.0, 0.0, 0.0, 0.0, 1.0))


def discount(m: MassFunction, gamma: float) -> MassFunction:
    return MassFunction(discount_array(m.as_array(), gamma))


def contour(m: MassFunction) -> ContourFunction:
    arr = m.as_array()
    return ContourFunction(arr[:N_CLASSES] + arr[OMEGA])


def fuse(m1: MassFunction, m2: MassFunction) -> MassFunction:
    return MassFunction(fuse_arrays(m1.as_array(), m2.as_array()))


# --- grids -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SemanticGrid:
    """Ego-centered H x W grid of mass functions.

    Row 0 is the farthest row ahead of the ego vehicle; the ego cell defaults
    to the middle of the bottom row. The mass array is read-only.
    """

    masses: np.ndarray
    meters_per_cell: float = DEFAULT_METERS_PER_CELL
    ego_cell: Optional[tuple] = field(default=None)

    def __post_init__(self):
        arr = np.asarray(self.masses, dtype=np.float64)
        if arr.ndim != 3:
            raise ParameterError(
                f"grid masses must have shape (H, W, {N_CHANNELS}), got {arr.shape}"
            )
        if arr.shape[0] * arr.shape[1] <= 0:
            raise ParameterError("grid must contain at least one cell")
        if self.meters_per_cell <= 0:
            raise ParameterError(f"meters_per_cell must be positive, got {self.meters_per_cell}")
        arr = _normalize_masses(arr)
        if isinstance(self.masses, np.ndarray) and np.shares_memory(arr, self.masses):
            arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "masses", arr)

        height, width = arr.shape[:2]
        ego = self.ego_cell if self.ego_cell is not None else (height - 1, width // 2)
        ego = (int(ego[0]), int(ego[1]))
        if not (0 <= ego[0] < height and 0 <= ego[1] < width):
            raise ParameterError(f"ego_cell {ego} outside a {height}x{width} grid")
        object.__setattr__(self, "ego_cell", ego)
        object.__setattr__(self, "meters_per_cell", float(self.meters_per_cell))

    @classmethod
    def vacuous(
        cls,
        height: int = DEFAULT_HEIGHT,
        width: int = DEFAULT_WIDTH,
        meters_per_cell: float = DEFAULT_METERS_PER_CELL,
        ego_cell: Optional[tuple] = None,
    ) -> "SemanticGrid":
        return cls(vacuous_array((height, width)), meters_per_cell, ego_cell)

    @classmethod
    def from_labels(
        cls,
        labels: np.ndarray,
        confidence: float = 0.99,
        meters_per_cell: float = DEFAULT_METERS_PER_CELL,
        ego_cell: Optional[tuple] = None,
    ) -> "SemanticGrid":
        """Certain one-hot grid on `labels`, then discounted to `confidence`."""
        labels = np.asarray(labels)
        onehot = np.zeros(labels.shape + (N_CHANNELS,), dtype=np.float64)
        np.put_along_axis(onehot, labels[..., None].astype(np.intp), 1.0, axis=-1)
        return cls(discount_array(onehot, confidence), meters_per_cell, ego_cell)

    @property
    def height(self) -> int:
        return self.masses.shape[0]

    @property
    def width(self) -> int:
        return self.masses.shape[1]

    @property
    def shape(self) -> tuple:
        return self.masses.shape[:2]

    @property
    def omega(self) -> np.ndarray:
        return self.masses[..., OMEGA]

    def cell(self, row: int, col: int) -> MassFunction:
        return MassFunction(self.masses[row, col])

    def same_frame(self, other: "SemanticGrid") -> bool:
        return (
            self.shape == other.shape
            and self.ego_cell == other.ego_cell
            and abs(self.meters_per_cell - other.meters_per_cell) <= EXACT_TOLERANCE
        )

    def with_masses(self, masses: np.ndarray) -> "SemanticGrid":
        """A grid in the same frame holding `masses`."""
        return SemanticGrid(masses, self.meters_per_cell, self.ego_cell)

    def argmax_labels(self) -> np.ndarray:
        return np.argmax(self.masses, axis=-1)

    def binarize(self) -> "SemanticGrid":
        """One-hot grid on the argmax channel, omega included."""
        onehot = np.zeros_like(self.masses)
        np.put_along_axis(onehot, self.argmax_labels()[..., None], 1.0, axis=-1)
        return self.with_masses(onehot)


def _require_same_frame(g1: SemanticGrid, g2: SemanticGrid) -> None:
    if not g1.same_frame(g2):
        raise ParameterError(
            "grids must share dimensions and metadata",
            left=[g1.height, g1.width, g1.meters_per_cell, *g1.ego_cell],
            right=[g2.height, g2.width, g2.meters_per_cell, *g2.ego_cell],
        )


def fuse_grids(g1: SemanticGrid, g2: SemanticGrid) -> SemanticGrid:
    """Cell-wise fusion of two grids in the same frame."""
    _require_same_frame(g1, g2)
    return g1.with_masses(fuse_arrays(g1.masses, g2.masses))


def discount_grid(g: SemanticGrid, gamma: float) -> SemanticGrid:
    return g.with_masses(discount_array(g.masses, gamma))
