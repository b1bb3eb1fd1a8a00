"""Evaluation orchestrator that runs policies over seeds in parallel waves."""

import asyncio
import logging
from typing import Callable, Optional

from src.config import ExperimentConfig
from src.episode import EpisodeRecord, run_episode
from src.policies import Policy
from src.request_mdp import RequestEnv

logger = logging.getLogger(__name__)


class EvaluationOrchestrator:
    """Coordinates episode runs in waves.

    Wave structure: one wave per policy, in the order given. Episodes of a wave
    run in parallel threads, at most `jobs` at a time, each under the configured
    timeout. Failures and timeouts become error entries instead of aborting the
    sweep.

    A thread cannot be cancelled: a timed-out episode frees its slot but keeps
    running until it finishes, and its result is discarded. Policies shared by
    the threads of a wave must therefore be thread-safe.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        policies: list[Policy],
        jobs: int = 1,
        features=None,
        env_factory: Optional[Callable[[], RequestEnv]] = None,
    ):
        """Initialize with the policies to evaluate and the parallelism limit."""
        self.config = config
        self.policies = policies
        self.jobs = max(1, jobs)
        self.features = features
        self.env_factory = env_factory or (lambda: RequestEnv.from_config(config))
        self.waves: list[str] = [p.name for p in policies]

        # Completed episodes per policy, ordered by seed
        self.results: dict[str, list[EpisodeRecord]] = {}
        # Failed runs per policy: {policy: [{seed, error}]}
        self.errors: dict[str, list[dict]] = {}
        self.steps_run = 0

    @property
    def timeout(self) -> float:
        return self.config.harness.episode_timeout_s

    @property
    def budget(self) -> int:
        return self.config.harness.step_budget

    def _check_budget(self) -> bool:
        """True while the step budget (0 = unlimited) is not exhausted."""
        if self.budget <= 0:
            return True
        if self.steps_run >= self.budget:
            logger.warning(
                "Step budget exhausted: %d steps run, budget is %d. Stopping evaluation.",
                self.steps_run,
                self.budget,
            )
            return False
        return True

    def _run_one(self, policy: Policy, seed: int) -> EpisodeRecord:
        return run_episode(
            self.env_factory(),
            policy,
            self.config.harness.episode_steps,
            seed,
            self.features if policy.needs_features else None,
        )

    async def run_wave(self, wave_index: int, seeds: Optional[list[int]] = None) -> list[EpisodeRecord]:
        """Run one policy over all seeds in parallel.

        Returns the completed episodes sorted by seed; failures are recorded in
        self.errors.
        """
        policy = self.policies[wave_index]
        seeds = list(seeds if seeds is not None else self.config.harness.seeds)
        semaphore = asyncio.Semaphore(self.jobs)

        async def guarded(seed: int) -> EpisodeRecord:
            async with semaphore:
                return await asyncio.wait_for(
                    asyncio.to_thread(self._run_one, policy, seed), timeout=self.timeout
                )

        results = await asyncio.gather(*(guarded(s) for s in seeds), return_exceptions=True)

        episodes = []
        errors = self.errors.setdefault(policy.name, [])
        for seed, result in zip(seeds, results):
            if isinstance(result, asyncio.TimeoutError):
                logger.error("Episode %s seed=%d timed out after %.0fs", policy.name, seed, self.timeout)
                errors.append({"seed": seed, "error": f"timed out after {self.timeout}s"})
            elif isinstance(result, Exception):
                logger.error("Episode %s seed=%d failed: %s", policy.name, seed, result, exc_info=result)
                errors.append({"seed": seed, "error": str(result)})
            else:
                episodes.append(result)
                self.steps_run += result.length
        episodes.sort(key=lambda r: r.seed)
        self.results.setdefault(policy.name, []).extend(episodes)
        return episodes

    async def run_all(self, seeds: Optional[list[int]] = None, on_wave_complete=None) -> dict:
        """Run all waves sequentially.

        Args:
            seeds: Episode seeds; defaults to the harness seeds
            on_wave_complete: Optional callback(wave_index, episodes) called after each wave

        Returns:
            Dict mapping policy names to their episodes
        """
        for wave_idx in range(len(self.waves)):
            if not self._check_budget():
                logger.warning("Stopping before %s due to the step budget", self.get_wave_description(wave_idx))
                break
            logger.info("Starting %s", self.get_wave_description(wave_idx))
            episodes = await self.run_wave(wave_idx, seeds)
            logger.info(
                "Completed %s: %d episodes, %d failed",
                self.get_wave_description(wave_idx),
                len(episodes),
                len(self.errors.get(self.waves[wave_idx], [])),
            )
            if on_wave_complete:
                on_wave_complete(wave_idx, episodes)

        logger.info(
            "Evaluation complete: %d policies, %d steps run",
            len(self.results),
            self.steps_run,
        )
        return self.results

    def get_wave_description(self, wave_index: int) -> str:
        """Human-readable description of a wave."""
        if 0 <= wave_index < len(self.waves):
            return f"Wave {wave_index + 1}: policy {self.waves[wave_index]}"
        return f"Wave {wave_index + 1}"
