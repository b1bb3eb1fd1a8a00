"""Cross-entropy-method search over the weights of a parametric request policy."""

import asyncio
import logging
import math
from typing import Callable, Optional

import numpy as np

from src.config import CemConfig
from src.episode import rollout_return
from src.errors import DivergenceError
from src.policies import ParametricPolicy
from src.request_mdp import RequestEnv

logger = logging.getLogger(__name__)

SEED_OFFSET = 1_000_003  # separates CEM rollout seeds from evaluation seeds


def generation_seeds(config: CemConfig, generation: int) -> list[int]:
    """Episode seeds shared by every candidate of one generation."""
    base = config.seed * SEED_OFFSET + generation * config.episodes_per_candidate
    return [base + e for e in range(config.episodes_per_candidate)]


async def _evaluate(
    env_factory: Callable[[], RequestEnv],
    features,
    thetas: list[np.ndarray],
    n_features: int,
    seeds: list[int],
    steps: int,
    jobs: int,
) -> np.ndarray:
    semaphore = asyncio.Semaphore(max(1, jobs))

    def rollout(theta, seed):
        policy = ParametricPolicy.from_vector(theta, n_features)
        return rollout_return(env_factory(), policy, steps, seed, features)

    async def guarded(theta, seed):
        async with semaphore:
            return await asyncio.to_thread(rollout, theta, seed)

    tasks = [guarded(theta, seed) for theta in thetas for seed in seeds]
    returns = await asyncio.gather(*tasks)
    return np.asarray(returns, dtype=np.float64).reshape(len(thetas), len(seeds)).mean(axis=1)


def _check_finite(returns: np.ndarray, generation: int) -> None:
    if not np.all(np.isfinite(returns)):
        bad = [int(i) for i in np.flatnonzero(~np.isfinite(returns))]
        raise DivergenceError(
            f"non-finite episode returns in generation {generation}",
            generation=generation,
            candidates=bad,
        )


async def train_cem_async(
    env_factory: Callable[[], RequestEnv],
    features,
    config: CemConfig,
    jobs: int = 1,
    initial: Optional[ParametricPolicy] = None,
) -> tuple:
    """
    Search policy weights with the cross-entropy method.

    The initial mean is evaluated first on the generation-0 seeds; each generation
    samples `population` weight vectors around the mean, keeps the elite fraction by
    mean return and refits mean and standard deviation. Returns the best weights seen
    and one trace row per generation.
    """
    env = env_factory()
    n_features = features.dim(*env.shape)
    policy = initial or ParametricPolicy.initial(n_features)
    mean = policy.weights.reshape(-1).copy()
    std = np.full_like(mean, config.init_std)
    rng = np.random.default_rng(config.seed)
    n_elite = max(1, math.ceil(config.elite_fraction * config.population))

    start = await _evaluate(
        env_factory, features, [mean], n_features, generation_seeds(config, 0),
        config.episode_steps, jobs,
    )
    _check_finite(start, -1)
    best_theta, best_return = mean.copy(), float(start[0])
    logger.info("CEM start: %d weights, initial return %.3f", mean.size, best_return)

    trace = []
    for generation in range(config.generations):
        thetas = [mean + std * rng.standard_normal(mean.size) for _ in range(config.population)]
        returns = await _evaluate(
            env_factory, features, thetas, n_features, generation_seeds(config, generation),
            config.episode_steps, jobs,
        )
        _check_finite(returns, generation)
        order = np.argsort(-returns, kind="stable")
        elites = np.stack([thetas[i] for i in order[:n_elite]])
        mean = elites.mean(axis=0)
        std = elites.std(axis=0) + config.extra_std
        top = int(order[0])
        if returns[top] > best_return:
            best_theta, best_return = thetas[top].copy(), float(returns[top])
        row = {
            "generation": generation,
            "mean_return": float(returns.mean()),
            "elite_mean": float(returns[order[:n_elite]].mean()),
            "best_return": best_return,
        }
        trace.append(row)
        logger.info(
            "CEM generation %d/%d: mean %.3f elite %.3f best %.3f",
            generation + 1, config.generations, row["mean_return"], row["elite_mean"], best_return,
        )
    return ParametricPolicy.from_vector(best_theta, n_features), trace


def train_cem(
    env_factory: Callable[[], RequestEnv],
    features,
    config: CemConfig,
    jobs: int = 1,
    initial: Optional[ParametricPolicy] = None,
) -> tuple:
    """Blocking wrapper around train_cem_async."""
    return asyncio.run(train_cem_async(env_factory, features, config, jobs, initial))


__all__ = ["generation_seeds", "train_cem", "train_cem_async"]
