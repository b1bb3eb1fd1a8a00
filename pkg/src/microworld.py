"""Seedable 2D micro-world producing complete and occlusion-limited semantic grids.

World frame: x east, y north, meters. The static layout is a label raster at
WORLD_CELL meters per cell with its origin at the south-west corner. Ego
frames are rendered into grids whose row 0 is farthest ahead.
"""

import logging
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Optional

import numpy as np

from src.config import ScenarioConfig
from src.errors import ConfigError
from src.evidential import (
    CAR,
    N_CLASSES,
    OTHER,
    PEDESTRIAN,
    ROAD,
    ROAD_LINES,
    SemanticGrid,
    discount_array,
    vacuous_array,
)

logger = logging.getLogger(__name__)

WORLD_WIDTH_M = 100.0
WORLD_LENGTH_M = 200.0
WORLD_CELL = 0.5  # meters per layout cell

CAR_FOOTPRINT = (3.0, 1.8)  # meters, length x width
PEDESTRIAN_FOOTPRINT = (0.7, 1.6)  # meters

OCCLUDING_CLASSES = (PEDESTRIAN, CAR, OTHER)

# Main north-south road and the crossing east-west road
ROAD_X = (43.0, 57.0)
CROSS_Y = (93.0, 107.0)
NORTH_LANES = (51.75, 55.25)
SOUTH_LANES = (48.25, 44.75)
EAST_LANES = (94.75, 98.25)
WEST_LANES = (101.75, 105.25)
ZEBRA_BANDS = ((87.0, 91.0), (109.0, 113.0))  # y ranges of the pedestrian crossings
CONTROL_LOOKAHEAD = 10  # route points (1 m apart) averaged into the global direction
MAX_ACCEL = 3.0  # m/s^2 mapped to control 1
MAX_YAW_RATE = 1.0  # rad/s mapped to control 1
TURN_RADIUS = 4.0  # meters, ego right turn at the crossing


@dataclass(frozen=True)
class Car:
    position: tuple  # (x, y) meters
    heading: float  # radians
    speed: float  # m/s
    path: tuple  # remaining waypoints
    footprint: tuple = CAR_FOOTPRINT


@dataclass(frozen=True)
class Pedestrian:
    position: tuple
    drift: tuple  # (vx, vy) m/s
    step_sigma: float  # m per step
    max_step: float  # m per step
    footprint: tuple = PEDESTRIAN_FOOTPRINT


@dataclass(frozen=True, eq=False)
class WorldState:
    """Static layout, dynamic agents and generator state at one step."""

    static_layout: np.ndarray
    cars: tuple
    pedestrians: tuple
    time: int
    rng_state: dict
    dt: float = 0.1

    def __post_init__(self):
        layout = np.asarray(self.static_layout, dtype=np.int8)
        layout.setflags(write=False)
        object.__setattr__(self, "static_layout", layout)

    @property
    def bounds(self) -> tuple:
        rows, cols = self.static_layout.shape
        return cols * WORLD_CELL, rows * WORLD_CELL


@dataclass(frozen=True)
class EgoState:
    """Ego pose, driving controls and motion since the previous step."""

    pose: tuple  # (x, y, theta)
    controls: tuple = (0.0, 0.0, 0.0, 0.0)  # (accel, steer, dir_x, dir_y)
    motion: tuple = (0.0, 0.0, 0.0)  # (dx forward, dy left, dtheta)
    route: tuple = ()
    progress_m: float = 0.0
    speed: float = 0.0


@dataclass(frozen=True)
class ObservationBundle:
    partial: SemanticGrid
    complete: SemanticGrid
    motion: tuple
    controls: tuple


# --- layout ------------------------------------------------------------------


def _world_axes() -> tuple:
    cols = int(round(WORLD_WIDTH_M / WORLD_CELL))
    rows = int(round(WORLD_LENGTH_M / WORLD_CELL))
    xs = (np.arange(cols) + 0.5) * WORLD_CELL
    ys = (np.arange(rows) + 0.5) * WORLD_CELL
    return np.meshgrid(xs, ys)


def build_layout(template: str) -> np.ndarray:
    """Label raster indexed [iy, ix] for a layout template."""
    x, y = _world_axes()
    layout = np.full(x.shape, OTHER, dtype=np.int8)

    on_main = (x >= ROAD_X[0]) & (x < ROAD_X[1])
    layout[on_main] = ROAD
    centre = (x >= 49.75) & (x < 50.25)
    layout[on_main & centre] = ROAD_LINES
    dashed = np.isclose(x, 46.75) | np.isclose(x, 53.25)
    dash_on = (np.floor(y / 3.0) % 2) == 0
    layout[dashed & dash_on] = ROAD_LINES

    if template == "crossing":
        on_cross = (y >= CROSS_Y[0]) & (y < CROSS_Y[1])
        layout[on_cross] = ROAD
        cross_centre = (y >= 99.75) & (y < 100.25)
        layout[on_cross & cross_centre & ~on_main] = ROAD_LINES
        for lo, hi in ZEBRA_BANDS:
            band = on_main & (y >= lo) & (y < hi)
            stripe = (np.floor(x / 1.0) % 2) == 0
            layout[band] = ROAD
            layout[band & stripe] = ROAD_LINES
        # open forecourts at the corners leave lines of sight into the side road
        for x0, x1, y0, y1 in ((57.0, 65.0, 85.0, 93.0), (35.0, 43.0, 107.0, 115.0)):
            layout[(x >= x0) & (x < x1) & (y >= y0) & (y < y1)] = ROAD
    return layout


def _zebra_cells(layout: np.ndarray) -> np.ndarray:
    x, y = _world_axes()
    in_band = np.zeros(layout.shape, dtype=bool)
    for lo, hi in ZEBRA_BANDS:
        in_band |= (y >= lo) & (y < hi)
    mask = in_band & (layout == ROAD_LINES)
    return np.column_stack([x[mask], y[mask]])


def _lanes(template: str) -> list:
    """(start, end) points of every drivable lane."""
    lanes = [((x, 0.0), (x, WORLD_LENGTH_M)) for x in NORTH_LANES]
    lanes += [((x, WORLD_LENGTH_M), (x, 0.0)) for x in SOUTH_LANES]
    if template == "crossing":
        lanes += [((0.0, y), (WORLD_WIDTH_M, y)) for y in EAST_LANES]
        lanes += [((WORLD_WIDTH_M, y), (0.0, y)) for y in WEST_LANES]
    return lanes


def _ego_route(template: str) -> tuple:
    x0 = NORTH_LANES[0]
    if template == "straight":
        return ((x0, 20.0), (x0, WORLD_LENGTH_M - 10.0))
    # right turn from the northbound lane into the eastbound lane
    radius = TURN_RADIUS
    centre = (x0 + radius, EAST_LANES[0] - radius)
    arc = [
        (centre[0] - radius * math.cos(a), centre[1] + radius * math.sin(a))
        for a in np.linspace(0.0, math.pi / 2.0, 7)
    ]
    return ((x0, 75.0),) + tuple(arc) + ((WORLD_WIDTH_M - 5.0, EAST_LANES[0]),)


# --- kinematics ----------------------------------------------------------------


def _advance_along(path: tuple, position: tuple, distance: float) -> tuple:
    """Move `distance` meters along a waypoint path; returns (position, heading, path)."""
    pos = np.asarray(position, dtype=np.float64)
    remaining = list(path)
    heading = None
    while remaining:
        target = np.asarray(remaining[0], dtype=np.float64)
        delta = target - pos
        gap = float(np.hypot(delta[0], delta[1]))
        if gap > 0.0:
            heading = math.atan2(delta[1], delta[0])
        if gap > distance:
            pos = pos + delta * (distance / gap)
            break
        pos = target
        distance -= gap
        remaining.pop(0)
    return (float(pos[0]), float(pos[1])), heading, tuple(remaining)


def _route_point(route: tuple, s: float) -> tuple:
    """Position and heading at arc length `s` along a polyline route."""
    pts = np.asarray(route, dtype=np.float64)
    seg = np.diff(pts, axis=0)
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    s = min(max(s, 0.0), cum[-1])
    i = int(np.searchsorted(cum, s, side="right") - 1)
    i = min(i, len(seg) - 1)
    frac = 0.0 if lengths[i] == 0 else (s - cum[i]) / lengths[i]
    p = pts[i] + frac * seg[i]
    return (float(p[0]), float(p[1])), math.atan2(seg[i][1], seg[i][0])


def _route_length(route: tuple) -> float:
    pts = np.asarray(route, dtype=np.float64)
    seg = np.diff(pts, axis=0)
    return float(np.hypot(seg[:, 0], seg[:, 1]).sum())


def _wrap(angle: float) -> float:
    return (angle + math.pi) % (2.0 * math.pi) - math.pi


def relative_motion(prev_pose: tuple, pose: tuple) -> tuple:
    """(dx forward, dy left, dtheta) of `pose` seen from `prev_pose`."""
    x0, y0, th0 = prev_pose
    x1, y1, th1 = pose
    ddx, ddy = x1 - x0, y1 - y0
    c, s = math.cos(th0), math.sin(th0)
    return (c * ddx + s * ddy, -s * ddx + c * ddy, _wrap(th1 - th0))


def _global_direction(route: tuple, s: float, pose: tuple) -> tuple:
    """Mean of the next route points, in the ego frame."""
    x, y, th = pose
    pts = [_route_point(route, s + k + 1.0)[0] for k in range(CONTROL_LOOKAHEAD)]
    mx = sum(p[0] for p in pts) / len(pts) - x
    my = sum(p[1] for p in pts) / len(pts) - y
    c, sn = math.cos(th), math.sin(th)
    return (c * mx + sn * my, -sn * mx + c * my)


def _clamp(position: tuple, bounds: tuple) -> tuple:
    return (min(max(position[0], 0.0), bounds[0]), min(max(position[1], 0.0), bounds[1]))


# --- init / step -------------------------------------------------------------


def world_init(seed: int, scenario: ScenarioConfig) -> tuple:
    """Build a reproducible world and ego state from a seed and scenario."""
    if not isinstance(scenario, ScenarioConfig):
        raise ConfigError(f"scenario must be a ScenarioConfig, got {type(scenario).__name__}")
    rng = np.random.Generator(np.random.PCG64(seed))
    layout = build_layout(scenario.template)
    bounds = (WORLD_WIDTH_M, WORLD_LENGTH_M)
    route = _ego_route(scenario.template)
    ego_start, _ = _route_point(route, 0.0)

    lanes = _lanes(scenario.template)
    cars = []
    for i in range(scenario.n_cars + scenario.n_parked_cars):
        parked = i >= scenario.n_cars
        start, end = lanes[int(rng.integers(len(lanes)))]
        start_v, end_v = np.asarray(start), np.asarray(end)
        for _ in range(20):
            frac = float(rng.uniform(0.05, 0.95))
            pos = start_v + frac * (end_v - start_v)
            if np.hypot(pos[0] - ego_start[0], pos[1] - ego_start[1]) > 8.0:
                break
        heading = math.atan2(end_v[1] - start_v[1], end_v[0] - start_v[0])
        if parked:
            # pulled over to the curb side of the lane
            pos = pos + 1.2 * np.array([math.sin(heading), -math.cos(heading)])
            speed = 0.0
        else:
            speed = float(rng.uniform(scenario.car_speed_min, scenario.car_speed_max))
        cars.append(
            Car(
                position=_clamp((float(pos[0]), float(pos[1])), bounds),
                heading=heading,
                speed=speed,
                path=(tuple(float(v) for v in end_v),),
            )
        )

    pedestrians = []
    zebra = _zebra_cells(layout) if scenario.template == "crossing" else None
    for _ in range(scenario.n_pedestrians):
        if zebra is not None and len(zebra):
            px, py = zebra[int(rng.integers(len(zebra)))]
            direction = 1.0 if px < 50.0 else -1.0
        else:
            side = int(rng.integers(2))
            px = float(rng.uniform(ROAD_X[0] + 0.5, ROAD_X[0] + 1.5)) if side == 0 else float(
                rng.uniform(ROAD_X[1] - 1.5, ROAD_X[1] - 0.5)
            )
            py = float(rng.uniform(0.0, WORLD_LENGTH_M))
            direction = 1.0 if side == 0 else -1.0
        pedestrians.append(
            Pedestrian(
                position=(float(px), float(py)),
                drift=(direction * scenario.ped_drift, 0.0),
                step_sigma=scenario.ped_step_sigma,
                max_step=scenario.ped_max_step,
            )
        )

    (x, y), heading = _route_point(route, 0.0)
    pose = (x, y, heading)
    ego = EgoState(
        pose=pose,
        controls=(0.0, 0.0) + _global_direction(route, 0.0, pose),
        motion=(0.0, 0.0, 0.0),
        route=route,
        progress_m=0.0,
        speed=scenario.ego_speed,
    )
    world = WorldState(
        static_layout=layout,
        cars=tuple(cars),
        pedestrians=tuple(pedestrians),
        time=0,
        rng_state=rng.bit_generator.state,
        dt=scenario.dt,
    )
    logger.debug(
        "World seed=%d template=%s cars=%d pedestrians=%d",
        seed, scenario.template, len(cars), len(pedestrians),
    )
    return world, ego


def world_step(w: WorldState, ego: EgoState) -> tuple:
    """Advance every agent and the ego by one time step."""
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = w.rng_state
    bounds = w.bounds
    dt = w.dt

    cars = []
    for car in w.cars:
        if car.speed <= 0.0 or not car.path:
            cars.append(car)
            continue
        position, heading, path = _advance_along(car.path, car.position, car.speed * dt)
        cars.append(
            replace(
                car,
                position=_clamp(position, bounds),
                heading=car.heading if heading is None else heading,
                path=path,
                speed=car.speed if path else 0.0,
            )
        )

    pedestrians = []
    for ped in w.pedestrians:
        step = np.asarray(ped.drift, dtype=np.float64) * dt
        step = step + rng.normal(0.0, 1.0, size=2) * ped.step_sigma
        norm = float(np.hypot(step[0], step[1]))
        if norm > ped.max_step > 0.0:
            step *= ped.max_step / norm
        elif ped.max_step == 0.0:
            step[:] = 0.0
        position = (ped.position[0] + float(step[0]), ped.position[1] + float(step[1]))
        pedestrians.append(replace(ped, position=_clamp(position, bounds)))

    new_ego = _step_ego(ego, dt)
    world = WorldState(
        static_layout=w.static_layout,
        cars=tuple(cars),
        pedestrians=tuple(pedestrians),
        time=w.time + 1,
        rng_state=rng.bit_generator.state,
        dt=dt,
    )
    return world, new_ego


def _step_ego(ego: EgoState, dt: float) -> EgoState:
    if not ego.route or len(ego.route) < 2:
        return replace(ego, motion=(0.0, 0.0, 0.0), controls=(0.0, 0.0) + tuple(ego.controls[2:]))
    total = _route_length(ego.route)
    progress = min(ego.progress_m + ego.speed * dt, total)
    travelled = progress - ego.progress_m
    if travelled > 0.0:
        (x, y), heading = _route_point(ego.route, progress)
    else:
        x, y, heading = ego.pose
    pose = (x, y, heading)
    speed = travelled / dt
    motion = relative_motion(ego.pose, pose)
    accel = max(-1.0, min(1.0, (speed - ego.speed) / (dt * MAX_ACCEL)))
    steer = max(-1.0, min(1.0, motion[2] / (dt * MAX_YAW_RATE)))
    return replace(
        ego,
        pose=pose,
        motion=motion,
        controls=(accel, steer) + _global_direction(ego.route, progress, pose),
        progress_m=progress,
        speed=speed if travelled > 0.0 else 0.0,
    )


def trajectory_digest(w: WorldState, ego: EgoState) -> tuple:
    """Hashable summary of all agent positions, for determinism checks."""
    return (
        w.time,
        tuple(c.position for c in w.cars),
        tuple(p.position for p in w.pedestrians),
        ego.pose,
    )


# --- rendering ---------------------------------------------------------------


@lru_cache(maxsize=16)
def _ego_frame_offsets(height: int, width: int, meters_per_cell: float) -> tuple:
    """Forward and rightward offsets in meters of every grid cell center."""
    ego_row, ego_col = height - 1, width // 2
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    forward = (ego_row - rows) * meters_per_cell
    right = (cols - ego_col) * meters_per_cell
    forward.setflags(write=False)
    right.setflags(write=False)
    return forward, right


def _cell_world_points(ego: EgoState, height: int, width: int, meters_per_cell: float) -> tuple:
    forward, right = _ego_frame_offsets(height, width, meters_per_cell)
    x, y, th = ego.pose
    c, s = math.cos(th), math.sin(th)
    wx = x + forward * c + right * s
    wy = y + forward * s - right * c
    return wx, wy


def _inside_rectangle(wx, wy, center, heading, footprint) -> np.ndarray:
    dx = wx - center[0]
    dy = wy - center[1]
    c, s = math.cos(heading), math.sin(heading)
    along = dx * c + dy * s
    across = -dx * s + dy * c
    return (np.abs(along) <= footprint[0] / 2.0) & (np.abs(across) <= footprint[1] / 2.0)


def render_labels(
    w: WorldState, ego: EgoState, height: int = 80, width: int = 120, meters_per_cell: float = 0.5
) -> np.ndarray:
    """True class of every ego-frame cell."""
    wx, wy = _cell_world_points(ego, height, width, meters_per_cell)
    ix = np.floor(wx / WORLD_CELL).astype(np.int64)
    iy = np.floor(wy / WORLD_CELL).astype(np.int64)
    rows, cols = w.static_layout.shape
    inside = (ix >= 0) & (ix < cols) & (iy >= 0) & (iy < rows)
    labels = np.full((height, width), OTHER, dtype=np.int64)
    labels[inside] = w.static_layout[iy[inside], ix[inside]]
    for car in w.cars:
        labels[_inside_rectangle(wx, wy, car.position, car.heading, car.footprint)] = CAR
    for ped in w.pedestrians:
        labels[_inside_rectangle(wx, wy, ped.position, 0.0, ped.footprint)] = PEDESTRIAN
    return labels


def _labels_to_grid(labels: np.ndarray, gamma: float) -> np.ndarray:
    onehot = np.zeros(labels.shape + (N_CLASSES + 1,), dtype=np.float64)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    return discount_array(onehot, gamma)


def render_complete(
    w: WorldState,
    ego: EgoState,
    height: int = 80,
    width: int = 120,
    meters_per_cell: float = 0.5,
    gamma: float = 0.99,
) -> SemanticGrid:
    """Fully informed ego-centered grid, noise-discounted by `gamma`."""
    labels = render_labels(w, ego, height, width, meters_per_cell)
    return SemanticGrid(_labels_to_grid(labels, gamma), meters_per_cell)


@dataclass(frozen=True, eq=False)
class SightLines:
    """Precomputed line-of-sight structure of one grid geometry."""

    parent: np.ndarray  # flat index of the next cell toward the ego, -1 at the ego
    levels: tuple  # flat indices grouped so parents always come first
    ego_index: int
    distance: np.ndarray  # cells, flattened
    bearing: np.ndarray  # radians from straight ahead, flattened


@lru_cache(maxsize=16)
def sight_lines(height: int, width: int) -> SightLines:
    """Parent chains stepping one cell back along each cell-center ray."""
    ego_row, ego_col = height - 1, width // 2
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    fwd = (ego_row - rows).astype(np.float64).ravel()
    lat = (cols - ego_col).astype(np.float64).ravel()
    dist = np.hypot(fwd, lat)
    ego_index = ego_row * width + ego_col

    parent = np.full(dist.shape, -1, dtype=np.int64)
    far = dist > 1.0
    scale = np.where(far, (dist - 1.0) / np.where(far, dist, 1.0), 0.0)
    p_fwd = np.floor(fwd * scale + 0.5).astype(np.int64)
    p_lat = np.floor(lat * scale + 0.5).astype(np.int64)
    p_row = np.clip(ego_row - p_fwd, 0, height - 1)
    p_col = np.clip(ego_col + p_lat, 0, width - 1)
    parent[far] = (p_row * width + p_col)[far]
    parent[~far] = ego_index
    parent[ego_index] = -1

    level = np.zeros(dist.shape, dtype=np.int64)
    for idx in np.argsort(dist, kind="stable"):
        if parent[idx] >= 0:
            level[idx] = level[parent[idx]] + 1
    levels = tuple(np.flatnonzero(level == k) for k in range(1, int(level.max()) + 1))
    bearing = np.arctan2(lat, fwd)
    for arr in (parent, dist, bearing):
        arr.setflags(write=False)
    return SightLines(parent, levels, ego_index, dist, bearing)


def visibility_mask(
    labels: np.ndarray, meters_per_cell: float, fov_deg: float, max_range_m: float
) -> np.ndarray:
    """Cells inside the forward wedge, in range, with an unobstructed chain to the ego."""
    height, width = labels.shape
    lines = sight_lines(height, width)
    passable = ~np.isin(labels.ravel(), OCCLUDING_CLASSES)
    passable[lines.ego_index] = True
    clear = np.zeros(labels.size, dtype=bool)
    clear[lines.ego_index] = True
    for idx in lines.levels:
        par = lines.parent[idx]
        clear[idx] = clear[par] & passable[par]
    in_wedge = np.abs(lines.bearing) <= math.radians(fov_deg) / 2.0 + 1e-12
    in_range = lines.distance * meters_per_cell <= max_range_m + 1e-12
    return (clear & in_wedge & in_range).reshape(height, width)


def render_partial(
    w: WorldState,
    ego: EgoState,
    fov_deg: float = 135.0,
    max_range_m: float = 30.0,
    height: int = 80,
    width: int = 120,
    meters_per_cell: float = 0.5,
    gamma: float = 0.99,
) -> SemanticGrid:
    """Occlusion-limited perception: complete values where visible, vacuous elsewhere."""
    labels = render_labels(w, ego, height, width, meters_per_cell)
    return partial_from_labels(labels, fov_deg, max_range_m, meters_per_cell, gamma)


def partial_from_labels(
    labels: np.ndarray,
    fov_deg: float,
    max_range_m: float,
    meters_per_cell: float,
    gamma: float = 0.99,
) -> SemanticGrid:
    visible = visibility_mask(labels, meters_per_cell, fov_deg, max_range_m)
    masses = np.where(
        visible[..., None],
        _labels_to_grid(labels, gamma),
        vacuous_array(labels.shape),
    )
    return SemanticGrid(masses, meters_per_cell)


def observe(
    w: WorldState, ego: EgoState, scenario: ScenarioConfig, labels: Optional[np.ndarray] = None
) -> ObservationBundle:
    """Both grids plus motion and controls for the current step."""
    if labels is None:
        labels = render_labels(
            w, ego, scenario.grid_height, scenario.grid_width, scenario.meters_per_cell
        )
    complete = SemanticGrid(
        _labels_to_grid(labels, scenario.sensor_gamma),
        scenario.meters_per_cell,
    )
    partial = partial_from_labels(
        labels, scenario.fov_deg, scenario.max_range_m, scenario.meters_per_cell,
        scenario.sensor_gamma,
    )
    return ObservationBundle(partial, complete, ego.motion, ego.controls)


def zero_agent_scenario(scenario: Optional[ScenarioConfig] = None) -> ScenarioConfig:
    """Same layout with no dynamic agents."""
    return replace(scenario or ScenarioConfig(), n_cars=0, n_parked_cars=0, n_pedestrians=0)


__all__ = [
    "Car",
    "EgoState",
    "ObservationBundle",
    "Pedestrian",
    "WorldState",
    "build_layout",
    "observe",
    "relative_motion",
    "render_complete",
    "render_labels",
    "render_partial",
    "sight_lines",
    "trajectory_digest",
    "visibility_mask",
    "world_init",
    "world_step",
    "zero_agent_scenario",
]
