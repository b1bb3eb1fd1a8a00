"""Request policies for the communication MDP."""

import logging
import threading
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from src.config import PolicyConfig
from src.errors import ParameterError
from src.evidential import CAR, N_CLASSES, OMEGA, PEDESTRIAN, SemanticGrid, fuse_grids
from src.microworld import CAR_FOOTPRINT, PEDESTRIAN_FOOTPRINT, sight_lines
from src.networks import ParamContext, RecognitionParams, gru_cell, pool_grid
from src.request_mdp import (
    BoundingBoxAction,
    CellRect,
    EnvPeek,
    RewardParams,
    SpatialFilterGrid,
    cells_of,
    reward,
    reward_density,
)
from src.tape import Var

logger = logging.getLogger(__name__)

GATE_INDEX = 4  # output row of the request gate in a parametric policy
N_POLICY_OUTPUTS = 5  # u, v, w, h, gate
KNOWN_OMEGA = 0.5  # cells with less ignorance anchor their neighbours' class prior


@dataclass(frozen=True, eq=False)
class PolicyInput:
    """What a policy sees at step t."""

    g_tilde: SemanticGrid
    filter: SpatialFilterGrid
    params: RewardParams
    features: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.filter.shape != self.g_tilde.shape:
            raise ParameterError(
                "filter and grid dimensions differ",
                filter=list(self.filter.shape),
                grid=list(self.g_tilde.shape),
            )
        if self.features is not None:
            object.__setattr__(
                self, "features", np.asarray(self.features, dtype=np.float64).reshape(-1)
            )


@dataclass(frozen=True)
class PolicyOutput:
    action: BoundingBoxAction
    score: float = 0.0


@dataclass(frozen=True)
class Candidate:
    action: BoundingBoxAction
    rect: CellRect

    def tie_key(self, score: float) -> tuple:
        return (-score, self.rect.size, self.rect.row0, self.rect.col0)


def candidate_boxes(
    height: int,
    width: int,
    anchor_rows: int = 16,
    anchor_cols: int = 24,
    sizes: tuple = (0.0625, 0.125),
) -> list[Candidate]:
    """Empty box followed by every (anchor, size) box of the lattice."""
    out = [Candidate(BoundingBoxAction.empty(), cells_of(BoundingBoxAction.empty(), height, width))]
    us = np.linspace(0.0, 1.0, anchor_cols) if anchor_cols > 1 else np.zeros(1)
    vs = np.linspace(0.0, 1.0, anchor_rows) if anchor_rows > 1 else np.zeros(1)
    for size in sizes:
        for v in vs:
            for u in us:
                action = BoundingBoxAction(float(u), float(v), size, size)
                out.append(Candidate(action, cells_of(action, height, width)))
    return out


def _rect_sums(values: np.ndarray, rects: list[CellRect]) -> np.ndarray:
    """Sums of `values` over each rectangle from a summed-area table."""
    table = np.zeros((values.shape[0] + 1, values.shape[1] + 1))
    table[1:, 1:] = values.cumsum(axis=0).cumsum(axis=1)
    bounds = np.array([(r.row0, r.row1, r.col0, r.col1) for r in rects], dtype=np.int64).reshape(-1, 4)
    r0, r1, c0, c1 = bounds.T
    sums = table[r1, c1] - table[r0, c1] - table[r1, c0] + table[r0, c0]
    empty = np.array([r.is_empty for r in rects], dtype=bool)
    return np.where(empty, 0.0, sums)


def _select(candidates: list[Candidate], scores: np.ndarray) -> tuple:
    best = min(range(len(candidates)), key=lambda i: candidates[i].tie_key(float(scores[i])))
    return candidates[best], float(scores[best])


def _known_shares(g: SemanticGrid) -> tuple:
    """Known-cell mask and the class shares of each cell's committed mass."""
    masses = g.masses
    committed = 1.0 - masses[..., OMEGA]
    known = masses[..., OMEGA] < KNOWN_OMEGA
    shares = masses[..., :OMEGA] / np.maximum(committed, 1e-12)[..., None]
    return known, shares


def observed_class_prior(g: SemanticGrid, s: SpatialFilterGrid) -> np.ndarray:
    """
    Class frequencies of the committed mass, weighted by the spatial filter.

    An all-ignorant grid gives the uniform prior.
    """
    weights = s.values[..., None] * g.masses[..., :OMEGA]
    total = weights.sum(axis=(0, 1))
    if total.sum() <= 1e-12:
        return np.full(N_CLASSES, 1.0 / N_CLASSES)
    return total / total.sum()


def expected_class_reward(pin: PolicyInput, override: Optional[float] = None) -> float:
    """Default r-bar: r_obj averaged under the filter-weighted observed class prior."""
    if override is not None:
        return float(override)
    return float(observed_class_prior(pin.g_tilde, pin.filter) @ np.asarray(pin.params.r_obj))


def _object_extents(meters_per_cell: float) -> np.ndarray:
    """Cells an occluding object can reach past its visible face, per class."""
    extents = np.full(N_CLASSES, np.inf)
    extents[PEDESTRIAN] = max(PEDESTRIAN_FOOTPRINT) / meters_per_cell
    extents[CAR] = max(CAR_FOOTPRINT) / meters_per_cell
    return extents


def _anchored_shares(
    shares: np.ndarray, found: np.ndarray, distance: np.ndarray, extents: np.ndarray, prior: np.ndarray
) -> np.ndarray:
    """Shares of each cell's anchor; objects stop at their extent, the rest falls back to `prior`."""
    beyond = distance[:, None] > extents[None, :]
    kept = np.where(beyond, 0.0, shares)
    out = kept + (1.0 - kept.sum(axis=1))[:, None] * prior[None, :]
    return np.where(found[:, None], out, prior[None, :])


def _ray_anchors(known: np.ndarray) -> tuple:
    """Nearest known cell toward the ego along each sight line, with its distance."""
    height, width = known.shape
    lines = sight_lines(height, width)
    flat = known.ravel()
    anchor = np.full(flat.size, -1, dtype=np.int64)
    distance = np.zeros(flat.size)
    for idx in lines.levels:
        par = lines.parent[idx]
        anchor[idx] = np.where(flat[par], par, anchor[par])
        distance[idx] = np.where(flat[par], 1.0, distance[par] + 1.0)
    return anchor, distance


def _row_anchors(known: np.ndarray, ego_col: int) -> tuple:
    """Nearest known cell in the same row, searching toward the ego column."""
    height, width = known.shape
    cols = np.broadcast_to(np.arange(width), known.shape)
    right = np.minimum.accumulate(np.where(known, cols, width)[:, ::-1], axis=1)[:, ::-1]
    left = np.maximum.accumulate(np.where(known, cols, -1), axis=1)
    anchor_col = np.where(cols < ego_col, right, left)
    found = (anchor_col >= 0) & (anchor_col < width)
    rows = np.broadcast_to(np.arange(height)[:, None], known.shape)
    anchor = np.where(found, rows * width + anchor_col, -1)
    return anchor.ravel(), found.ravel(), np.abs(anchor_col - cols).ravel().astype(np.float64)


def context_class_prior(g: SemanticGrid, s: SpatialFilterGrid) -> np.ndarray:
    """
    Per-cell class distribution of the mass a grant would reveal.

    A cell's own committed mass is kept; its ignorance is split between the
    class of the nearest known cell along its sight line and the nearest known
    cell in its row. Pedestrian and car anchors only count within one object
    length; beyond that, and where no anchor exists, the observed prior is used.
    """
    height, width = g.shape
    known, shares = _known_shares(g)
    prior = observed_class_prior(g, s)
    extents = _object_extents(g.meters_per_cell)
    flat_shares = shares.reshape(-1, N_CLASSES)

    if g.ego_cell == (height - 1, width // 2):
        ray, ray_dist = _ray_anchors(known)
        ray_prior = _anchored_shares(
            flat_shares[np.maximum(ray, 0)], ray >= 0, ray_dist, extents, prior
        )
    else:
        ray_prior = np.broadcast_to(prior, flat_shares.shape)
    row, row_found, row_dist = _row_anchors(known, g.ego_cell[1])
    row_prior = _anchored_shares(flat_shares[np.maximum(row, 0)], row_found, row_dist, extents, prior)

    context = (0.5 * (ray_prior + row_prior)).reshape(height, width, N_CLASSES)
    return g.masses[..., :OMEGA] + g.masses[..., OMEGA, None] * context


def expected_reward_field(pin: PolicyInput, override: Optional[float] = None) -> np.ndarray:
    """Expected class reward per cell; a scalar override applies everywhere."""
    if override is not None:
        return np.full(pin.g_tilde.shape, float(override))
    return context_class_prior(pin.g_tilde, pin.filter) @ np.asarray(pin.params.r_obj)


class Policy:
    """Base class for request policies.

    Subclasses set `name` and implement `act`. `peek` is only read by policies
    that cheat with the next step's ground truth.
    """

    name: str
    needs_features: bool = False

    def act(
        self, pin: PolicyInput, rng: np.random.Generator, peek: Optional[EnvPeek] = None
    ) -> PolicyOutput:
        raise NotImplementedError


class BroadcastPolicy(Policy):
    name = "broadcast"

    def act(self, pin, rng, peek=None) -> PolicyOutput:
        return PolicyOutput(BoundingBoxAction.full())


class SilentPolicy(Policy):
    name = "silent"

    def act(self, pin, rng, peek=None) -> PolicyOutput:
        return PolicyOutput(BoundingBoxAction.empty())


class RandomPolicy(Policy):
    """Requests half of the time, with a uniformly drawn box."""

    name = "random"
    request_probability = 0.5

    def act(self, pin, rng, peek=None) -> PolicyOutput:
        draw = rng.random(5)
        if draw[0] >= self.request_probability:
            return PolicyOutput(BoundingBoxAction.empty())
        return PolicyOutput(BoundingBoxAction(*draw[1:]))


class _CandidatePolicy(Policy):
    """Policies choosing among a fixed lattice of boxes, cached per grid shape.

    Episodes of one policy run in worker threads, so the cache is filled under a lock.
    """

    def __init__(self, config: Optional[PolicyConfig] = None):
        self.config = config or PolicyConfig()
        self._candidates: dict[tuple, list[Candidate]] = {}
        self._lock = threading.Lock()

    def candidates(self, height: int, width: int) -> list[Candidate]:
        key = (height, width)
        with self._lock:
            if key not in self._candidates:
                self._candidates[key] = candidate_boxes(
                    height, width, self.config.anchor_rows, self.config.anchor_cols,
                    self.config.box_sizes,
                )
            return self._candidates[key]


class GreedyIgnorancePolicy(_CandidatePolicy):
    """
    Scores each candidate by the filtered ignorance it would clear, valued at the
    expected class reward of each cell, net of the communication cost; picks the
    argmax. Without an explicit `expected_class_reward` the per-cell value comes
    from `context_class_prior`.
    """

    name = "greedy"

    def score(self, pin: PolicyInput, candidates: Optional[list[Candidate]] = None) -> np.ndarray:
        p = pin.params
        candidates = candidates if candidates is not None else self.candidates(*pin.g_tilde.shape)
        if not candidates:
            raise ParameterError("candidate set is empty")
        r_hat = expected_reward_field(pin, self.config.expected_class_reward)
        per_cell = pin.filter.values * pin.g_tilde.masses[..., OMEGA] ** p.w_exp * r_hat
        per_cell = per_cell - p.eta * p.r_min
        sums = _rect_sums(per_cell, [c.rect for c in candidates])
        scores = sums - p.k_min_cells * (1.0 - p.eta) * p.r_min
        empty = np.array([c.rect.is_empty for c in candidates])
        scores[empty] = p.no_coop_penalty
        return scores

    def act(self, pin, rng, peek=None, candidates: Optional[list[Candidate]] = None) -> PolicyOutput:
        candidates = candidates if candidates is not None else self.candidates(*pin.g_tilde.shape)
        best, score = _select(candidates, self.score(pin, candidates))
        return PolicyOutput(best.action, score)


class OracleGreedyPolicy(_CandidatePolicy):
    """Picks the candidate with the highest true reward on the peeked next step."""

    name = "oracle"

    def score(
        self, pin: PolicyInput, peek: EnvPeek, candidates: Optional[list[Candidate]] = None
    ) -> np.ndarray:
        candidates = candidates if candidates is not None else self.candidates(*pin.g_tilde.shape)
        if not candidates:
            raise ParameterError("candidate set is empty")
        # A grant leaves cells outside its box untouched, so one full-grid density
        # serves every candidate.
        full = fuse_grids(peek.g_tilde, peek.bundle.complete)
        density = reward_density(full, peek.g_tilde, pin.filter, pin.params)
        return np.array([reward(c.action, density, pin.params) for c in candidates])

    def act(self, pin, rng, peek=None, candidates: Optional[list[Candidate]] = None) -> PolicyOutput:
        if peek is None:
            raise ParameterError("the oracle policy needs the next step's ground truth")
        candidates = candidates if candidates is not None else self.candidates(*pin.g_tilde.shape)
        best, score = _select(candidates, self.score(pin, peek, candidates))
        return PolicyOutput(best.action, score)


class ParametricPolicy(Policy):
    """
    Affine map from features to (u, v, w, h, gate). A positive gate requests the box
    sigmoid(u, v, w, h); otherwise no request is made.
    """

    name = "parametric"
    needs_features = True

    def __init__(self, weights: np.ndarray):
        weights = np.asarray(weights, dtype=np.float64)
        if weights.ndim != 2 or weights.shape[0] != N_POLICY_OUTPUTS:
            raise ParameterError(
                f"policy weights must be ({N_POLICY_OUTPUTS}, n_features + 1), got {weights.shape}"
            )
        self.weights = weights

    @classmethod
    def initial(cls, n_features: int) -> "ParametricPolicy":
        """Always requests the centered half-size box."""
        weights = np.zeros((N_POLICY_OUTPUTS, n_features + 1))
        weights[GATE_INDEX, -1] = 1.0
        return cls(weights)

    @classmethod
    def from_vector(cls, theta: np.ndarray, n_features: int) -> "ParametricPolicy":
        return cls(np.asarray(theta).reshape(N_POLICY_OUTPUTS, n_features + 1))

    @property
    def n_features(self) -> int:
        return self.weights.shape[1] - 1

    def act(self, pin, rng, peek=None) -> PolicyOutput:
        if pin.features is None or pin.features.shape[0] != self.n_features:
            got = None if pin.features is None else pin.features.shape[0]
            raise ParameterError(f"policy expects {self.n_features} features, got {got}")
        out = self.weights @ np.append(pin.features, 1.0)
        gate = float(out[GATE_INDEX])
        if gate <= 0.0:
            return PolicyOutput(BoundingBoxAction.empty(), gate)
        return PolicyOutput(BoundingBoxAction(*expit(out[:GATE_INDEX])), gate)


# --- feature extractors ------------------------------------------------------


class GridFeatures:
    """Pooled S * Omega map of the current knowledge."""

    name = "grid"

    def __init__(self, pool: int = 8):
        self.pool = pool

    def dim(self, height: int, width: int) -> int:
        return (height // self.pool) * (width // self.pool)

    def start(self) -> "GridFeatures":
        return self

    def __call__(self, g_tilde: SemanticGrid, s: SpatialFilterGrid) -> np.ndarray:
        h, w = g_tilde.shape
        if h % self.pool or w % self.pool:
            raise ParameterError(f"grid {h}x{w} does not pool evenly by {self.pool}")
        weighted = s.values * g_tilde.masses[..., OMEGA]
        blocks = weighted.reshape(h // self.pool, self.pool, w // self.pool, self.pool)
        return blocks.mean(axis=(1, 3)).reshape(-1)


class BeliefFeatures:
    """Pooled observation followed by a running GRU belief over past observations."""

    name = "belief"

    def __init__(self, recognition: RecognitionParams, pool: int = 8):
        if recognition.v_dim or recognition.c_dim:
            raise ParameterError("belief features read pooled grids only")
        self.recognition = recognition
        self.pool = pool

    def dim(self, height: int, width: int) -> int:
        return self.recognition.x_dim + self.recognition.belief_dim

    def start(self) -> "_BeliefTracker":
        return _BeliefTracker(self.recognition, self.pool)


class _BeliefTracker:
    def __init__(self, recognition: RecognitionParams, pool: int):
        self.ctx = ParamContext(recognition.weights)
        self.pool = pool
        self.x_dim = recognition.x_dim
        self.h = Var(np.zeros(recognition.belief_dim))

    def __call__(self, g_tilde: SemanticGrid, s: SpatialFilterGrid) -> np.ndarray:
        x = pool_grid(g_tilde, self.pool)
        if x.shape[0] != self.x_dim:
            raise ParameterError(f"pooled grid has {x.shape[0]} values, recognition reads {self.x_dim}")
        self.h = Var(gru_cell(self.ctx, "gru", self.h, x).value)
        return np.concatenate([x, self.h.value])


FEATURE_EXTRACTORS = ("grid", "belief")

POLICIES = {
    cls.name: cls
    for cls in (BroadcastPolicy, SilentPolicy, RandomPolicy, GreedyIgnorancePolicy, OracleGreedyPolicy)
}


def make_policy(name: str, config: Optional[PolicyConfig] = None, weights=None) -> Policy:
    """Build a registered policy by name; parametric policies need their weights."""
    if name == ParametricPolicy.name:
        if weights is None:
            raise ParameterError("the parametric policy needs a checkpoint")
        return ParametricPolicy(weights)
    if name not in POLICIES:
        raise ParameterError(
            f"unknown policy '{name}'", policy=name, known=sorted(POLICIES) + [ParametricPolicy.name]
        )
    cls = POLICIES[name]
    if issubclass(cls, _CandidatePolicy):
        return cls(config)
    return cls()
