"""Config-section and table-header schema validation."""

import logging

logger = logging.getLogger(__name__)

# Expected keys per config section.
CONFIG_SCHEMAS: dict[str, set[str]] = {
    "root": {"scenario", "memory", "reward", "policy", "cem", "kernel", "harness"},
    "scenario": {
        "template", "n_cars", "n_parked_cars", "n_pedestrians", "car_speed_min",
        "car_speed_max", "ego_speed", "ped_drift", "ped_step_sigma", "ped_max_step",
        "grid_height", "grid_width", "meters_per_cell", "fov_deg", "max_range_m",
        "sensor_gamma", "dt",
    },
    "memory": {"age_gamma", "max_age_steps", "reset_threshold"},
    "reward": {
        "eta", "k_min_cells", "w_exp", "r_obj_per_m2", "penalty", "alpha", "beta_f",
        "beta_l", "zeta",
    },
    "policy": {
        "name", "expected_class_reward", "anchor_rows", "anchor_cols", "box_sizes", "checkpoint",
    },
    "cem": {
        "population", "elite_fraction", "generations", "episodes_per_candidate",
        "episode_steps", "init_std", "extra_std", "seed",
    },
    "kernel": {
        "latent_dim", "belief_dim", "hidden_dim", "alpha_x", "alpha_y", "y_likelihood",
        "class_weights", "pool", "t_min_fraction", "n_samples", "property_samples",
    },
    "harness": {"episode_steps", "seeds", "episode_timeout_s", "step_budget", "gain_normalization"},
}

# Column order of every CSV the tools write.
TABLE_COLUMNS: dict[str, tuple] = {
    "motion": ("t", "dx", "dy", "dtheta", "accel", "steer", "dirx", "diry"),
    "episode": (
        "t", "u", "v", "w", "h", "reward", "request_cells",
        "gained_pedestrian", "gained_car", "gained_road_lines", "gained_road", "gained_other",
        "achievable_pedestrian", "achievable_car", "achievable_road_lines", "achievable_road",
        "achievable_other", "omega_before", "omega_after",
    ),
    "metrics": (
        "policy", "scenario", "episodes", "gain_p", "gain_c", "gain_r",
        "request_size", "mean_reward",
    ),
    "loss_trace": ("step", "encoder", "decoder", "prediction", "total"),
    "cem_trace": ("generation", "mean_return", "elite_mean", "best_return"),
}


def validate_config_section(section: str, data: dict) -> list[str]:
    """Validate one config section against its expected keys.

    Returns a list of warnings (empty if valid). Does NOT raise; unknown keys
    are ignored by the loader after being reported.
    """
    warnings = []

    if not isinstance(data, dict):
        warnings.append(f"{section}: section is not an object (got {type(data).__name__})")
        return warnings

    expected = CONFIG_SCHEMAS.get(section)
    if expected is None:
        warnings.append(f"{section}: unknown config section, cannot validate")
        return warnings

    unknown = set(data.keys()) - expected
    if unknown:
        warnings.append(
            f"{section}: ignoring unknown keys {sorted(unknown)}, expected a subset of {sorted(expected)}"
        )

    checked = set() if section == "root" else set(data.keys()) & expected
    for key in sorted(checked):
        value = data[key]
        if value is None and key not in {"expected_class_reward", "checkpoint"}:
            warnings.append(f"{section}: key '{key}' is null, default used")
        elif value == [] or value == {} or value == "":
            warnings.append(f"{section}: key '{key}' is empty")

    return warnings


def validate_table_header(kind: str, header: list[str]) -> list[str]:
    """Compare a CSV header against the documented column order."""
    expected = TABLE_COLUMNS.get(kind)
    if expected is None:
        return [f"{kind}: unknown table kind, cannot validate"]
    if tuple(header) == expected:
        return []
    missing = [c for c in expected if c not in header]
    extra = [c for c in header if c not in expected]
    warnings = []
    if missing:
        warnings.append(f"{kind}: missing columns {missing}")
    if extra:
        warnings.append(f"{kind}: unexpected columns {extra}")
    if not missing and not extra:
        warnings.append(f"{kind}: columns out of order")
    return warnings
