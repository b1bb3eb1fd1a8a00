"""Communication MDP: bounding-box requests, spatial filter, rewards and the environment.

A request at step t is granted at step t + 1: the cells of the box are copied
from the complete grid of t + 1 and fused into the memory-integrated
perception. The reward values newly gained class mass net of communication
cost.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from src.config import ExperimentConfig, MemoryConfig, RewardConfig, ScenarioConfig
from src.errors import ParameterError
from src.evidential import (
    N_CLASSES,
    SemanticGrid,
    fuse_grids,
    vacuous_array,
)
from src.memory import MemoryBuffer, age, integrate, transform
from src.microworld import (
    EgoState,
    ObservationBundle,
    WorldState,
    observe,
    world_init,
    world_step,
)

logger = logging.getLogger(__name__)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class BoundingBoxAction:
    """Request box: (u, v) anchor and (w, h) size, all fractions of the grid."""

    u: float
    v: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("u", "v", "w", "h"):
            value = float(getattr(self, name))
            if not math.isfinite(value) or not 0.0 <= value <= 1.0:
                raise ParameterError(f"{name} must be in [0, 1], got {value}", **{name: value})
            object.__setattr__(self, name, value)

    @classmethod
    def empty(cls) -> "BoundingBoxAction":
        return cls(0.0, 0.0, 0.0, 0.0)

    @classmethod
    def full(cls) -> "BoundingBoxAction":
        return cls(0.0, 0.0, 1.0, 1.0)

    def as_tuple(self) -> tuple:
        return (self.u, self.v, self.w, self.h)


@dataclass(frozen=True)
class CellRect:
    """Half-open row/column range of a request."""

    row0: int
    row1: int
    col0: int
    col1: int

    @property
    def is_empty(self) -> bool:
        return self.row1 <= self.row0 or self.col1 <= self.col0

    @property
    def size(self) -> int:
        return 0 if self.is_empty else (self.row1 - self.row0) * (self.col1 - self.col0)

    @property
    def slices(self) -> tuple:
        return slice(self.row0, self.row1), slice(self.col0, self.col1)

    def contains(self, row: int, col: int) -> bool:
        return self.row0 <= row < self.row1 and self.col0 <= col < self.col1


EMPTY_RECT = CellRect(0, 0, 0, 0)


def cells_of(a: BoundingBoxAction, height: int, width: int) -> CellRect:
    """Cells covered by a box; the anchor range shrinks with size so boxes always fit."""
    hc = round_half_up(a.h * (height - 1))
    wc = round_half_up(a.w * (width - 1))
    if hc == 0 or wc == 0:
        return EMPTY_RECT
    row0 = round_half_up(a.v * (height - 1 - hc))
    col0 = round_half_up(a.u * (width - 1 - wc))
    return CellRect(row0, row0 + hc + 1, col0, col0 + wc + 1)


@dataclass(frozen=True)
class RewardParams:
    """Reward knobs with per-cell class rewards normalized to [0, 1]."""

    eta: float = 0.3
    k_min_cells: int = 36
    w_exp: float = 2.0
    r_obj: tuple = (1.0, 0.0, 0.0, 0.0, 0.0)
    no_coop_penalty: float = -15.0
    alpha: float = 0.5
    beta_f: float = 0.8
    beta_l: float = 1.0
    zeta: float = 0.01

    def __post_init__(self):
        r_obj = tuple(float(v) for v in self.r_obj)
        object.__setattr__(self, "r_obj", r_obj)
        if len(r_obj) != N_CLASSES:
            raise ParameterError(f"r_obj needs {N_CLASSES} values, got {len(r_obj)}")
        if any(v < 0.0 or v > 1.0 for v in r_obj):
            raise ParameterError("r_obj values must lie in [0, 1]", r_obj=r_obj)
        if any(r_obj[k] < r_obj[k + 1] for k in range(N_CLASSES - 1)):
            raise ParameterError("r_obj must be nonincreasing", r_obj=r_obj)
        if r_obj[-1] != 0.0:
            raise ParameterError("r_obj of class 'other' must be 0", r_obj=r_obj)
        if not 0.0 <= self.eta <= 1.0:
            raise ParameterError(f"eta must be in [0, 1], got {self.eta}")
        if self.w_exp <= 0.0:
            raise ParameterError(f"w_exp must be positive, got {self.w_exp}")
        if not 0.0 <= self.alpha < 1.0:
            raise ParameterError(f"alpha must be in [0, 1), got {self.alpha}")
        if not (0.0 <= self.beta_f <= 1.0 and 0.0 <= self.beta_l <= 1.0):
            raise ParameterError("beta_f and beta_l must lie in [0, 1]")
        if not 0.0 <= self.zeta <= 1.0:
            raise ParameterError(f"zeta must be in [0, 1], got {self.zeta}")

    @property
    def r_min(self) -> float:
        """Smallest nonzero class reward."""
        return self.r_obj[N_CLASSES - 2]

    @classmethod
    def from_config(cls, config: RewardConfig, meters_per_cell: float = 0.5) -> "RewardParams":
        per_cell = np.asarray(config.r_obj_per_m2, dtype=np.float64) * meters_per_cell**2
        peak = float(per_cell.max())
        if peak <= 0.0:
            raise ParameterError("r_obj_per_m2 needs a positive entry")
        return cls(
            eta=config.eta,
            k_min_cells=config.k_min_cells,
            w_exp=config.w_exp,
            r_obj=tuple(float(v) for v in per_cell / peak),
            no_coop_penalty=config.penalty,
            alpha=config.alpha,
            beta_f=config.beta_f,
            beta_l=config.beta_l,
            zeta=config.zeta,
        )


def default_reward_params() -> RewardParams:
    return RewardParams.from_config(RewardConfig())


@dataclass(frozen=True, eq=False)
class SpatialFilterGrid:
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ParameterError(f"filter must be 2-D, got shape {values.shape}")
        if np.any(values < 0.0) or np.any(values > 1.0):
            raise ParameterError("filter values must lie in [0, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple:
        return self.values.shape


def build_spatial_filter(
    p: RewardParams, height: int = 80, width: int = 120, ego_cell: Optional[tuple] = None
) -> SpatialFilterGrid:
    """Forward decay times frontal cone, valued per cell."""
    if p.zeta <= 0.0:
        raise ParameterError("zeta must be positive", zeta=p.zeta)
    ego_row, ego_col = ego_cell if ego_cell is not None else (height - 1, width // 2)
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    forward = np.abs(ego_row - rows).astype(np.float64)
    lateral = np.abs(cols - ego_col).astype(np.float64)
    max_forward = forward.max()
    depth = forward / max_forward if max_forward > 0 else np.zeros_like(forward)

    s_f = 1.0 - (p.beta_f / (1.0 - p.alpha)) * np.maximum(0.0, depth - p.alpha)
    cone = np.abs(np.cos(np.arctan2(lateral, forward)))
    s_l = 1.0 - (p.beta_l / p.zeta) * np.maximum(0.0, p.zeta - cone)
    return SpatialFilterGrid(np.clip(s_f * s_l, 0.0, 1.0))


def extract_mask(complete: SemanticGrid, a: BoundingBoxAction) -> SemanticGrid:
    """Granted excerpt: complete values inside the box, vacuous elsewhere."""
    rect = cells_of(a, complete.height, complete.width)
    masses = vacuous_array(complete.shape)
    if not rect.is_empty:
        rows, cols = rect.slices
        masses[rows, cols] = complete.masses[rows, cols]
    return complete.with_masses(masses)


def reward_density(
    g_next: SemanticGrid, g_tilde_next: SemanticGrid, s: SpatialFilterGrid, p: RewardParams
) -> np.ndarray:
    """Per-cell reward: filtered, exponentiated class-mass gains minus the minimum-gain cost."""
    if not g_next.same_frame(g_tilde_next) or s.shape != g_next.shape:
        raise ParameterError(
            "grids and filter must share dimensions",
            g_next=list(g_next.shape),
            g_tilde_next=list(g_tilde_next.shape),
            filter=list(s.shape),
        )
    gain = np.maximum(0.0, g_next.masses[..., :N_CLASSES] - g_tilde_next.masses[..., :N_CLASSES])
    valued = (gain**p.w_exp) @ np.asarray(p.r_obj)
    return -p.eta * p.r_min + s.values * valued


def reward(a: BoundingBoxAction, density: np.ndarray, p: RewardParams) -> float:
    rect = cells_of(a, *density.shape)
    if rect.is_empty:
        return float(p.no_coop_penalty)
    rows, cols = rect.slices
    base = -p.k_min_cells * (1.0 - p.eta) * p.r_min
    return float(base + density[rows, cols].sum())


# --- environment -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EnvState:
    """Episode state after step t: world, ego, memory and current knowledge G_t."""

    world: WorldState
    ego: EgoState
    memory: MemoryBuffer
    knowledge: SemanticGrid
    t: int = 0


@dataclass(frozen=True, eq=False)
class EnvPeek:
    """Next step as it unfolds before any request is granted."""

    world: WorldState
    ego: EgoState
    bundle: ObservationBundle
    memory: MemoryBuffer
    g_tilde: SemanticGrid


class RequestEnv:
    """Micro-world, memory and reward wired into one sequential environment."""

    def __init__(
        self,
        scenario: Optional[ScenarioConfig] = None,
        memory: Optional[MemoryConfig] = None,
        reward_config: Optional[RewardConfig] = None,
    ):
        self.scenario = scenario or ScenarioConfig()
        self.memory_config = memory or MemoryConfig()
        self.params = RewardParams.from_config(
            reward_config or RewardConfig(), self.scenario.meters_per_cell
        )
        self.filter = build_spatial_filter(
            self.params, self.scenario.grid_height, self.scenario.grid_width
        )

    @classmethod
    def from_config(cls, config: ExperimentConfig) -> "RequestEnv":
        return cls(config.scenario, config.memory, config.reward)

    @property
    def shape(self) -> tuple:
        return self.scenario.grid_height, self.scenario.grid_width

    def reset(self, seed: int) -> EnvState:
        world, ego = world_init(seed, self.scenario)
        bundle = observe(world, ego, self.scenario)
        buf = MemoryBuffer.empty(
            self.scenario.grid_height,
            self.scenario.grid_width,
            self.scenario.meters_per_cell,
            self.memory_config,
        )
        buf, knowledge = integrate(buf, bundle.partial)
        logger.debug("Environment reset seed=%d", seed)
        return EnvState(world=world, ego=ego, memory=buf, knowledge=knowledge, t=0)

    def peek(self, state: EnvState) -> EnvPeek:
        """Advance the world and memory one step without granting anything."""
        world, ego = world_step(state.world, state.ego)
        bundle = observe(world, ego, self.scenario)
        buf = age(transform(state.memory, ego.motion))
        buf, g_tilde = integrate(buf, bundle.partial)
        return EnvPeek(world=world, ego=ego, bundle=bundle, memory=buf, g_tilde=g_tilde)

    def step(
        self, state: EnvState, action: BoundingBoxAction, peek: Optional[EnvPeek] = None
    ) -> tuple:
        """Grant `action` at t + 1; returns (next state, reward, observation bundle)."""
        pk = peek if peek is not None else self.peek(state)
        mask = extract_mask(pk.bundle.complete, action)
        g_next = fuse_grids(pk.g_tilde, mask)
        density = reward_density(g_next, pk.g_tilde, self.filter, self.params)
        r = reward(action, density, self.params)
        buf, _ = integrate(pk.memory, mask)
        next_state = EnvState(
            world=pk.world, ego=pk.ego, memory=buf, knowledge=g_next, t=state.t + 1
        )
        return next_state, r, pk.bundle


def env_step(env: RequestEnv, state: EnvState, a: BoundingBoxAction) -> tuple:
    return env.step(state, a)


__all__ = [
    "BoundingBoxAction",
    "CellRect",
    "EMPTY_RECT",
    "EnvPeek",
    "EnvState",
    "RequestEnv",
    "RewardParams",
    "SpatialFilterGrid",
    "build_spatial_filter",
    "cells_of",
    "default_reward_params",
    "env_step",
    "extract_mask",
    "reward",
    "reward_density",
    "round_half_up",
]
