"""Shared fixtures: a small world that runs episodes in milliseconds."""

import pytest

from src.config import ExperimentConfig, HarnessConfig, ScenarioConfig
from src.request_mdp import RequestEnv


@pytest.fixture
def small_config():
    """16x24 grid, few agents, short episodes."""
    return ExperimentConfig(
        scenario=ScenarioConfig(
            grid_height=16, grid_width=24, n_cars=2, n_parked_cars=1, n_pedestrians=3
        ),
        harness=HarnessConfig(episode_steps=4, seeds=(0, 1, 2)),
    )


@pytest.fixture
def small_env(small_config):
    return RequestEnv.from_config(small_config)
