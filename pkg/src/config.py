"""Experiment configuration: validated sections, loader and markdown rendering."""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

from src.errors import ConfigError
from src.schemas import validate_config_section

logger = logging.getLogger(__name__)

# The only environment override: where to find the config file
CONFIG_ENV_VAR = "COOPSIM_CONFIG"

TEMPLATES = {"crossing", "straight"}
GAIN_NORMALIZATIONS = {"pooled", "per_step"}
Y_LIKELIHOODS = {"gaussian", "weighted_ce"}
MIN_EMISSION_VARIANCE = 1.0 / (2.0 * math.pi)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


@dataclass(frozen=True)
class ScenarioConfig:
    """Micro-world layout, agent population and sensor geometry."""

    template: str = "crossing"
    n_cars: int = 6
    n_parked_cars: int = 2
    n_pedestrians: int = 8
    car_speed_min: float = 4.0  # m/s
    car_speed_max: float = 10.0  # m/s
    ego_speed: float = 6.0  # m/s
    ped_drift: float = 1.0  # m/s across the road
    ped_step_sigma: float = 0.05  # m per step
    ped_max_step: float = 0.3  # m per step
    grid_height: int = 80
    grid_width: int = 120
    meters_per_cell: float = 0.5
    fov_deg: float = 135.0
    max_range_m: float = 30.0
    sensor_gamma: float = 0.99
    dt: float = 0.1  # seconds per step

    def __post_init__(self):
        """Validate fields after initialization."""
        _require(
            self.template in TEMPLATES,
            f"template must be one of {sorted(TEMPLATES)}, got '{self.template}'",
        )
        for name in ("n_cars", "n_parked_cars", "n_pedestrians", "grid_height", "grid_width"):
            value = getattr(self, name)
            _require(
                isinstance(value, int) and not isinstance(value, bool),
                f"{name} must be an integer, got {type(value).__name__}",
            )
            _require(value >= 0, f"{name} must be nonnegative, got {value}")
        _require(self.grid_height > 0 and self.grid_width > 0, "grid must have at least one cell")
        _require(
            0.0 <= self.car_speed_min <= self.car_speed_max,
            f"car speeds must satisfy 0 <= min <= max, got {self.car_speed_min}, {self.car_speed_max}",
        )
        _require(self.ego_speed >= 0.0, f"ego_speed must be nonnegative, got {self.ego_speed}")
        _require(self.ped_step_sigma >= 0.0, "ped_step_sigma must be nonnegative")
        _require(self.ped_max_step >= 0.0, "ped_max_step must be nonnegative")
        _require(self.meters_per_cell > 0.0, "meters_per_cell must be positive")
        _require(0.0 < self.fov_deg <= 360.0, f"fov_deg must be in (0, 360], got {self.fov_deg}")
        _require(self.max_range_m > 0.0, "max_range_m must be positive")
        _require(0.0 <= self.sensor_gamma <= 1.0, "sensor_gamma must be in [0, 1]")
        _require(self.dt > 0.0, "dt must be positive")


@dataclass(frozen=True)
class MemoryConfig:
    age_gamma: float = 0.9
    max_age_steps: int = 20
    reset_threshold: float = 0.99

    def __post_init__(self):
        _require(0.0 <= self.age_gamma <= 1.0, f"age_gamma must be in [0, 1], got {self.age_gamma}")
        _require(self.max_age_steps >= 0, "max_age_steps must be nonnegative")
        _require(0.0 < self.reset_threshold <= 1.0, "reset_threshold must be in (0, 1]")


@dataclass(frozen=True)
class RewardConfig:
    """Raw reward knobs as they appear in the config file."""

    eta: float = 0.3
    k_min_cells: int = 36
    w_exp: float = 2.0
    r_obj_per_m2: tuple = (540 / (0.7 * 1.6), 540 / (3 * 1.8), 20.0, 20.0, 0.0)
    penalty: float = -15.0
    alpha: float = 0.5
    beta_f: float = 0.8
    beta_l: float = 1.0
    zeta: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "r_obj_per_m2", tuple(float(v) for v in self.r_obj_per_m2))
        _require(len(self.r_obj_per_m2) == 5, "r_obj_per_m2 needs 5 values")
        _require(0.0 <= self.eta <= 1.0, f"eta must be in [0, 1], got {self.eta}")
        _require(self.k_min_cells >= 0, "k_min_cells must be nonnegative")
        _require(self.w_exp > 0.0, "w_exp must be positive")
        _require(0.0 <= self.alpha < 1.0, "alpha must be in [0, 1)")
        _require(0.0 <= self.beta_f <= 1.0, "beta_f must be in [0, 1]")
        _require(0.0 <= self.beta_l <= 1.0, "beta_l must be in [0, 1]")
        _require(0.0 < self.zeta <= 1.0, f"zeta must be in (0, 1], got {self.zeta}")


@dataclass(frozen=True)
class PolicyConfig:
    name: str = "greedy"  # policy run when --policies is not given
    expected_class_reward: Optional[float] = None  # None: per-cell context prior
    anchor_rows: int = 16
    anchor_cols: int = 24
    box_sizes: tuple = (0.0625, 0.125)
    checkpoint: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "box_sizes", tuple(float(s) for s in self.box_sizes))
        _require(self.anchor_rows >= 1 and self.anchor_cols >= 1, "anchor lattice must be nonempty")
        _require(
            all(0.0 < s <= 1.0 for s in self.box_sizes) and self.box_sizes,
            f"box_sizes must lie in (0, 1], got {self.box_sizes}",
        )


@dataclass(frozen=True)
class CemConfig:
    population: int = 16
    elite_fraction: float = 0.25
    generations: int = 10
    episodes_per_candidate: int = 2
    episode_steps: int = 20
    init_std: float = 0.5
    extra_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        _require(1 <= self.population <= 64, f"population must be in [1, 64], got {self.population}")
        _require(0.0 < self.elite_fraction <= 1.0, "elite_fraction must be in (0, 1]")
        _require(0 <= self.generations <= 100, f"generations must be in [0, 100], got {self.generations}")
        _require(self.episodes_per_candidate >= 1, "episodes_per_candidate must be positive")
        _require(self.episode_steps >= 1, "episode_steps must be positive")
        _require(self.init_std > 0.0 and self.extra_std >= 0.0, "std settings must be positive")


@dataclass(frozen=True)
class KernelConfig:
    latent_dim: int = 4
    belief_dim: int = 8
    hidden_dim: int = 8
    alpha_x: float = 0.5
    alpha_y: float = 0.5
    y_likelihood: str = "gaussian"
    class_weights: tuple = (100.0, 10.0, 1.0, 0.2, 0.1, 1.0)
    pool: int = 8
    t_min_fraction: float = 0.4
    n_samples: int = 1
    property_samples: int = 10_000

    def __post_init__(self):
        object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))
        _require(1 <= self.latent_dim <= 64, "latent_dim must be in [1, 64]")
        _require(
            self.alpha_x >= MIN_EMISSION_VARIANCE and self.alpha_y >= MIN_EMISSION_VARIANCE,
            f"emission variances must be >= 1/(2*pi), got {self.alpha_x}, {self.alpha_y}",
        )
        _require(
            self.y_likelihood in Y_LIKELIHOODS,
            f"y_likelihood must be one of {sorted(Y_LIKELIHOODS)}, got '{self.y_likelihood}'",
        )
        _require(len(self.class_weights) == 6, "class_weights needs 6 values")
        _require(self.pool >= 1, "pool must be positive")
        _require(0.0 < self.t_min_fraction <= 1.0, "t_min_fraction must be in (0, 1]")


@dataclass(frozen=True)
class HarnessConfig:
    episode_steps: int = 50
    seeds: tuple = tuple(range(20))
    episode_timeout_s: float = 600.0
    step_budget: int = 0  # 0 means no limit
    gain_normalization: str = "pooled"

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        _require(self.episode_steps >= 1, "episode_steps must be at least 1")
        _require(len(self.seeds) > 0, "seeds must be nonempty")
        _require(self.episode_timeout_s > 0, "episode_timeout_s must be positive")
        _require(self.step_budget >= 0, "step_budget must be nonnegative")
        _require(
            self.gain_normalization in GAIN_NORMALIZATIONS,
            f"gain_normalization must be one of {sorted(GAIN_NORMALIZATIONS)}",
        )


SECTIONS = {
    "scenario": ScenarioConfig,
    "memory": MemoryConfig,
    "reward": RewardConfig,
    "policy": PolicyConfig,
    "cem": CemConfig,
    "kernel": KernelConfig,
    "harness": HarnessConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    """All configuration sections of one run."""

    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    cem: CemConfig = field(default_factory=CemConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)

    def __post_init__(self):
        for name, cls in SECTIONS.items():
            value = getattr(self, name)
            if not isinstance(value, cls):
                raise ConfigError(f"{name} must be a {cls.__name__}, got {type(value).__name__}")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        """Build from a nested dict, logging warnings for unknown keys."""
        if not isinstance(data, dict):
            raise ConfigError(f"config must be a JSON object, got {type(data).__name__}")
        for warning in validate_config_section("root", data):
            logger.warning("Config validation: %s", warning)
        sections = {}
        for name, section_cls in SECTIONS.items():
            raw = data.get(name, {})
            if not isinstance(raw, dict):
                raise ConfigError(f"section '{name}' must be an object", section=name)
            for warning in validate_config_section(name, raw):
                logger.warning("Config validation: %s", warning)
            known = {f.name for f in fields(section_cls)}
            kwargs = {k: _coerce(v) for k, v in raw.items() if k in known}
            try:
                sections[name] = section_cls(**kwargs)
            except TypeError as e:
                raise ConfigError(f"section '{name}': {e}", section=name) from e
        return cls(**sections)

    def with_overrides(self, section: str, **changes) -> "ExperimentConfig":
        """Copy with some keys of one section replaced."""
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section '{section}'")
        updated = replace(getattr(self, section), **changes)
        return replace(self, **{section: updated})

    def to_dict(self) -> dict:
        """Serialize to a JSON-compatible dict."""
        return {name: _plain(asdict(getattr(self, name))) for name in SECTIONS}

    def to_markdown(self) -> str:
        """Render as markdown for run reports."""
        lines = ["# Experiment Configuration"]
        for name, values in self.to_dict().items():
            lines.extend(["", f"## {name.capitalize()}"])
            for key, value in values.items():
                if isinstance(value, list) and len(value) > 8:
                    value = f"{value[:8]} ... ({len(value)} values)"
                lines.append(f"- **{key}:** {value}")
        return "\n".join(lines)


def _coerce(value):
    if isinstance(value, list):
        return tuple(value)
    return value


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def resolve_config_path(path: Optional[str] = None) -> Optional[str]:
    """Explicit path wins, then the environment variable, else None."""
    if path:
        return path
    return os.environ.get(CONFIG_ENV_VAR) or None


def load_config(path: Optional[str] = None) -> ExperimentConfig:
    """Load and validate an experiment config; defaults when no file is given."""
    resolved = resolve_config_path(path)
    if resolved is None:
        logger.info("No config file given, using defaults")
        return ExperimentConfig()
    logger.info("Loading config from %s", resolved)
    try:
        with open(resolved, encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {resolved}", path=resolved) from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}", path=resolved) from e
    return ExperimentConfig.from_dict(data)
