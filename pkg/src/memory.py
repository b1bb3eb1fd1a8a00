"""Short-term perception memory: ego-motion resampling, ageing and integration.

Each step runs transform -> age -> integrate. Cells are resampled to the
nearest destination cell; several sources landing on one destination are
fused in (destination, source) order.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from src.config import MemoryConfig
from src.evidential import (
    SemanticGrid,
    discount_array,
    fuse_arrays,
    fuse_grids,
    vacuous_array,
)
from src.errors import ParameterError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class MemoryBuffer:
    """Remembered grid in the current ego frame with per-cell ages in steps."""

    grid: SemanticGrid
    ages: Optional[np.ndarray] = None
    age_gamma: float = 0.9
    max_age_steps: int = 20
    reset_threshold: float = 0.99

    def __post_init__(self):
        ages = np.zeros(self.grid.shape, dtype=np.int64) if self.ages is None else self.ages
        ages = np.array(ages, dtype=np.int64)
        if ages.shape != self.grid.shape:
            raise ParameterError(
                f"age table shape {ages.shape} does not match grid {self.grid.shape}"
            )
        ages.setflags(write=False)
        object.__setattr__(self, "ages", ages)
        if not 0.0 <= self.age_gamma <= 1.0:
            raise ParameterError(f"age_gamma must be in [0, 1], got {self.age_gamma}")
        if self.max_age_steps < 0:
            raise ParameterError("max_age_steps must be nonnegative")

    @classmethod
    def empty(
        cls,
        height: int = 80,
        width: int = 120,
        meters_per_cell: float = 0.5,
        config: Optional[MemoryConfig] = None,
    ) -> "MemoryBuffer":
        config = config or MemoryConfig()
        return cls(
            grid=SemanticGrid.vacuous(height, width, meters_per_cell),
            age_gamma=config.age_gamma,
            max_age_steps=config.max_age_steps,
            reset_threshold=config.reset_threshold,
        )


def destination_cells(
    height: int, width: int, meters_per_cell: float, ego_cell: tuple, motion: tuple
) -> tuple:
    """Nearest destination (row, col) of every source cell after the ego moves by `motion`."""
    dx, dy, dtheta = (float(v) for v in motion)
    ego_row, ego_col = ego_cell
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    forward = (ego_row - rows) * meters_per_cell - dx
    left = (ego_col - cols) * meters_per_cell - dy
    c, s = math.cos(dtheta), math.sin(dtheta)
    new_forward = c * forward + s * left
    new_left = -s * forward + c * left
    dest_row = ego_row - np.floor(new_forward / meters_per_cell + 0.5).astype(np.int64)
    dest_col = ego_col - np.floor(new_left / meters_per_cell + 0.5).astype(np.int64)
    return dest_row, dest_col


def transform(buf: MemoryBuffer, motion: tuple) -> MemoryBuffer:
    """Re-express the remembered grid in the new ego frame."""
    grid = buf.grid
    height, width = grid.shape
    dest_row, dest_col = destination_cells(
        height, width, grid.meters_per_cell, grid.ego_cell, motion
    )
    inside = (dest_row >= 0) & (dest_row < height) & (dest_col >= 0) & (dest_col < width)
    src = np.flatnonzero(inside.ravel())
    dest = (dest_row * width + dest_col).ravel()[src]

    masses = grid.masses.reshape(-1, grid.masses.shape[-1])
    ages = buf.ages.ravel()
    out = vacuous_array((height * width,))
    out_ages = np.zeros(height * width, dtype=np.int64)

    if src.size:
        order = np.lexsort((src, dest))
        src, dest = src[order], dest[order]
        first = np.r_[True, dest[1:] != dest[:-1]]
        group_start = np.maximum.accumulate(np.where(first, np.arange(dest.size), 0))
        rank = np.arange(dest.size) - group_start

        out[dest[first]] = masses[src[first]]
        out_ages[dest[first]] = ages[src[first]]
        for k in range(1, int(rank.max()) + 1):
            sel = rank == k
            d, s = dest[sel], src[sel]
            out[d] = fuse_arrays(out[d], masses[s])
            out_ages[d] = np.minimum(out_ages[d], ages[s])

    new_grid = grid.with_masses(out.reshape(grid.masses.shape))
    return replace(buf, grid=new_grid, ages=out_ages.reshape(height, width))


def age(buf: MemoryBuffer) -> MemoryBuffer:
    """Discount every cell and forget cells older than max_age_steps."""
    masses = discount_array(buf.grid.masses, buf.age_gamma)
    ages = buf.ages + 1
    expired = ages > buf.max_age_steps
    if np.any(expired):
        masses = np.where(expired[..., None], vacuous_array(buf.grid.shape), masses)
        ages = np.where(expired, 0, ages)
    return replace(buf, grid=buf.grid.with_masses(masses), ages=ages)


def integrate(buf: MemoryBuffer, g: SemanticGrid) -> tuple:
    """Fuse new evidence into memory; returns (updated buffer, fused grid)."""
    fused = fuse_grids(buf.grid, g)
    observed = g.omega < buf.reset_threshold
    ages = np.where(observed, 0, buf.ages)
    return replace(buf, grid=fused, ages=ages), fused


def memory_step(buf: MemoryBuffer, motion: tuple, g: SemanticGrid) -> tuple:
    """transform -> age -> integrate for one time step."""
    return integrate(age(transform(buf, motion)), g)


def steps_to_forget(age_gamma: float, epsilon: float) -> int:
    """Number of age() calls after which 1 - omega < epsilon for any start."""
    if not 0.0 < age_gamma < 1.0 or not 0.0 < epsilon < 1.0:
        raise ParameterError("age_gamma and epsilon must lie in (0, 1)")
    return math.ceil(math.log(epsilon) / math.log(age_gamma))
