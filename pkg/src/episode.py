"""Episode runner: per-step records of rewards, requests and gained class mass."""

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from src.errors import ParameterError
from src.evidential import CLASSES, N_CLASSES, OMEGA, fuse_grids
from src.networks import pool_grid
from src.policies import Policy, PolicyInput
from src.request_mdp import RequestEnv, cells_of, extract_mask
from src.training import SequenceData

logger = logging.getLogger(__name__)

SIGNIFICANT_DIGITS = 9
POLICY_STREAM = 1  # rng stream of policy draws, kept apart from the world's
GAIN_TOLERANCE = 1e-9


def round_sig(value: float, digits: int = SIGNIFICANT_DIGITS) -> float:
    return float(f"{float(value):.{digits}g}")


@dataclass(frozen=True)
class StepRecord:
    """One step of an episode; floats are rounded so CSV round-trips are exact."""

    t: int
    action: tuple  # (u, v, w, h)
    reward: float
    request_cells: int
    gained: tuple  # per class, in CLASSES order
    achievable: tuple
    omega_before: float
    omega_after: float

    def __post_init__(self):
        object.__setattr__(self, "action", tuple(round_sig(v) for v in self.action))
        object.__setattr__(self, "gained", tuple(round_sig(v) for v in self.gained))
        object.__setattr__(self, "achievable", tuple(round_sig(v) for v in self.achievable))
        for name in ("reward", "omega_before", "omega_after"):
            object.__setattr__(self, name, round_sig(getattr(self, name)))
        if len(self.action) != 4 or len(self.gained) != N_CLASSES or len(self.achievable) != N_CLASSES:
            raise ParameterError("step record fields have the wrong length", t=self.t)
        for k, (g, a) in enumerate(zip(self.gained, self.achievable)):
            if g > a + GAIN_TOLERANCE * max(1.0, a):
                raise ParameterError(
                    f"gained {CLASSES[k]} mass {g} exceeds achievable {a}", t=self.t, cls=CLASSES[k]
                )

    def to_row(self) -> dict:
        row = {"t": self.t}
        row.update(dict(zip(("u", "v", "w", "h"), self.action)))
        row["reward"] = self.reward
        row["request_cells"] = self.request_cells
        row.update({f"gained_{c}": v for c, v in zip(CLASSES, self.gained)})
        row.update({f"achievable_{c}": v for c, v in zip(CLASSES, self.achievable)})
        row["omega_before"] = self.omega_before
        row["omega_after"] = self.omega_after
        return row

    @classmethod
    def from_row(cls, row: dict) -> "StepRecord":
        return cls(
            t=int(row["t"]),
            action=tuple(float(row[k]) for k in ("u", "v", "w", "h")),
            reward=float(row["reward"]),
            request_cells=int(row["request_cells"]),
            gained=tuple(float(row[f"gained_{c}"]) for c in CLASSES),
            achievable=tuple(float(row[f"achievable_{c}"]) for c in CLASSES),
            omega_before=float(row["omega_before"]),
            omega_after=float(row["omega_after"]),
        )


@dataclass(frozen=True)
class EpisodeRecord:
    seed: int
    scenario: str
    policy: str
    steps: tuple
    height: int = 80
    width: int = 120

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        for i, step in enumerate(self.steps):
            if step.t != i:
                raise ParameterError(f"step {i} is recorded as t={step.t}", seed=self.seed)

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def total_reward(self) -> float:
        return float(sum(s.reward for s in self.steps))


def _features(extractor, pin_grid, env):
    if extractor is None:
        return None
    return extractor(pin_grid, env.filter)


def run_episode(
    env: RequestEnv,
    policy: Policy,
    steps: int,
    seed: int,
    features=None,
    on_step: Optional[Callable] = None,
) -> EpisodeRecord:
    """
    Roll `policy` for `steps` steps from env.reset(seed).

    Each step records the class mass the grant added and the mass a full-grid grant
    would have added against the same memory-integrated grid. on_step, when given, is
    called as on_step(t, next_state, bundle) after every step.
    """
    if steps < 1:
        raise ParameterError(f"episodes need at least one step, got {steps}")
    if policy.needs_features and features is None:
        raise ParameterError(f"policy '{policy.name}' needs a feature extractor")
    state = env.reset(seed)
    rng = np.random.default_rng((seed, POLICY_STREAM))
    tracker = features.start() if features is not None else None
    height, width = env.shape
    records = []
    for t in range(steps):
        peek = env.peek(state)
        pin = PolicyInput(state.knowledge, env.filter, env.params, _features(tracker, state.knowledge, env))
        out = policy.act(pin, rng, peek)
        state, r, bundle = env.step(state, out.action, peek)

        full = fuse_grids(peek.g_tilde, bundle.complete)
        gain = np.maximum(0.0, full.masses[..., :N_CLASSES] - peek.g_tilde.masses[..., :N_CLASSES])
        rect = cells_of(out.action, height, width)
        inside = np.zeros((height, width, 1))
        if not rect.is_empty:
            rows, cols = rect.slices
            inside[rows, cols] = 1.0
        records.append(
            StepRecord(
                t=t,
                action=out.action.as_tuple(),
                reward=r,
                request_cells=rect.size,
                gained=tuple((gain * inside).sum(axis=(0, 1))),
                achievable=tuple(gain.sum(axis=(0, 1))),
                omega_before=float(peek.g_tilde.masses[..., OMEGA].mean()),
                omega_after=float(state.knowledge.masses[..., OMEGA].mean()),
            )
        )
        logger.debug("seed=%d t=%d reward=%.4f cells=%d", seed, t, r, rect.size)
        if on_step is not None:
            on_step(t, state, bundle)
    episode = EpisodeRecord(seed, env.scenario.template, policy.name, tuple(records), height, width)
    logger.info(
        "Episode %s seed=%d finished: %d steps, return %.3f",
        policy.name, seed, steps, episode.total_reward,
    )
    return episode


def rollout_return(env: RequestEnv, policy: Policy, steps: int, seed: int, features=None) -> float:
    """Total reward of one episode without the per-step bookkeeping."""
    state = env.reset(seed)
    rng = np.random.default_rng((seed, POLICY_STREAM))
    tracker = features.start() if features is not None else None
    total = 0.0
    for _ in range(steps):
        peek = env.peek(state)
        pin = PolicyInput(state.knowledge, env.filter, env.params, _features(tracker, state.knowledge, env))
        state, r, _ = env.step(state, policy.act(pin, rng, peek).action, peek)
        total += r
    return total


def collect_sequences(
    env: RequestEnv, policy: Policy, seeds, steps: int, pool: int = 8
) -> list[SequenceData]:
    """
    Training sequences from simulated episodes: x from the knowledge grid, y from the
    complete grid, v the ego motion, c the controls, a the requests and m the granted
    excerpts, all grids pooled.
    """
    if steps < 2:
        raise ParameterError("sequences need at least two steps")
    out = []
    for seed in seeds:
        state = env.reset(seed)
        rng = np.random.default_rng((seed, POLICY_STREAM))
        xs, ys, vs, cs, acts, masks = [], [], [], [], [], []
        for t in range(steps):
            peek = env.peek(state)
            pin = PolicyInput(state.knowledge, env.filter, env.params)
            action = policy.act(pin, rng, peek).action
            state, _, bundle = env.step(state, action, peek)
            xs.append(pool_grid(state.knowledge, pool))
            ys.append(pool_grid(bundle.complete, pool))
            vs.append(bundle.motion)
            cs.append(bundle.controls)
            if t > 0:
                acts.append(action.as_tuple())
                masks.append(pool_grid(extract_mask(bundle.complete, action), pool))
        out.append(
            SequenceData(
                x=np.array(xs), y=np.array(ys), v=np.array(vs), c=np.array(cs),
                a=np.array(acts), m=np.array(masks),
            )
        )
    logger.info("Collected %d sequences of %d steps with policy %s", len(out), steps, policy.name)
    return out
