"""Deterministic synthetic scenes observed by a ray-casting 2D lidar.

Objects are rectangles moving along piecewise-linear waypoint trajectories.
The module produces lidar scans, inverse-sensor-model measurement grids and
the oracle ground truth (exact boxes and per-cell static/dynamic labels).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numba
import numpy as np
import yaml

from .boxes import ObjectBox
from .grid import GridGeometry, ds_combine_arrays, follow_ego

FREE, STATIC, DYNAMIC, UNOBSERVABLE = 0, 1, 2, 3
STATIC_SPEED_THRESHOLD = 0.1
P_HIT = 0.75
P_FREE = 0.45
_MASS_CAP = 1.0 - 1e-6


class ScenarioError(ValueError):
    pass


def _interp_pose(traj: np.ndarray, t: float) -> tuple[float, float, float]:
    times = traj[:, 0]
    if len(traj) == 1 or t <= times[0]:
        return tuple(traj[0, 1:4])
    if t >= times[-1]:
        return tuple(traj[-1, 1:4])
    k = int(np.searchsorted(times, t, side="right")) - 1
    a = (t - times[k]) / (times[k + 1] - times[k])
    e = traj[k, 1] + a * (traj[k + 1, 1] - traj[k, 1])
    n = traj[k, 2] + a * (traj[k + 1, 2] - traj[k, 2])
    dh = (traj[k + 1, 3] - traj[k, 3] + math.pi) % (2 * math.pi) - math.pi
    return (float(e), float(n), float(traj[k, 3] + a * dh))


def _interp_velocity(traj: np.ndarray, t: float) -> tuple[float, float]:
    times = traj[:, 0]
    if len(traj) == 1 or t < times[0] or t >= times[-1]:
        return (0.0, 0.0)
    k = int(np.searchsorted(times, t, side="right")) - 1
    dt = times[k + 1] - times[k]
    return ((traj[k + 1, 1] - traj[k, 1]) / dt, (traj[k + 1, 2] - traj[k, 2]) / dt)


@dataclass
class ObjectSpec:
    """Rectangle of ``width`` x ``length`` following (t, east, north, heading) waypoints.

    The length axis points along the heading. Before the first and after the
    last waypoint the object holds its end pose.
    """

    width: float
    length: float
    kind: str = "dynamic"
    trajectory: list = field(default_factory=lambda: [(0.0, 0.0, 0.0, 0.0)])
    name: str = ""

    def __post_init__(self):
        if not (self.width > 0 and self.length > 0):
            raise ScenarioError(f"object {self.name!r}: width and length must be positive")
        if self.kind not in ("static", "dynamic"):
            raise ScenarioError(f"object {self.name!r}: kind must be 'static' or 'dynamic'")
        traj = np.asarray(self.trajectory, dtype=float).reshape(-1, 4)
        if len(traj) == 0:
            raise ScenarioError(f"object {self.name!r}: empty trajectory")
        if np.any(np.diff(traj[:, 0]) <= 0):
            raise ScenarioError(f"object {self.name!r}: waypoint times must strictly increase")
        if not np.all(np.isfinite(traj)):
            raise ScenarioError(f"object {self.name!r}: non-finite waypoint")
        self._traj = traj

    def pose(self, t: float) -> tuple[float, float, float]:
        return _interp_pose(self._traj, t)

    def velocity(self, t: float) -> tuple[float, float]:
        if self.kind == "static":
            return (0.0, 0.0)
        return _interp_velocity(self._traj, t)

    def speed(self, t: float) -> float:
        return math.hypot(*self.velocity(t))

    def box(self, t: float) -> ObjectBox:
        e, n, h = self.pose(t)
        return ObjectBox(e, n, self.width, self.length, h)


@dataclass
class SensorSpec:
    beam_count: int = 1440
    angular_span: float = 2 * math.pi
    max_range: float = 30.0
    range_noise_sigma: float = 0.02
    dropout_prob: float = 0.0
    p_hit: float = P_HIT
    p_free: float = P_FREE

    def __post_init__(self):
        if self.beam_count < 1:
            raise ScenarioError("beam_count must be >= 1")
        if not self.max_range > 0:
            raise ScenarioError("max_range must be positive")
        if self.range_noise_sigma < 0:
            raise ScenarioError("range_noise_sigma must be >= 0")
        if not 0 <= self.dropout_prob < 1:
            raise ScenarioError("dropout_prob must be in [0, 1)")

    def azimuths(self) -> np.ndarray:
        """Beam azimuths in the sensor frame, strictly increasing."""
        n = self.beam_count
        if self.angular_span >= 2 * math.pi - 1e-12:
            return np.arange(n) * (2 * math.pi / n)
        if n == 1:
            return np.zeros(1)
        return -self.angular_span / 2 + np.arange(n) * (self.angular_span / (n - 1))


@dataclass
class ScenarioSpec:
    duration: float
    frame_rate: float
    geometry: GridGeometry
    objects: list[ObjectSpec]
    sensor: SensorSpec = field(default_factory=SensorSpec)
    ego_trajectory: list = field(default_factory=lambda: [(0.0, 0.0, 0.0, 0.0)])
    rng_seed: int = 0
    name: str = ""

    def __post_init__(self):
        if not self.duration > 0:
            raise ScenarioError("duration must be positive")
        if not self.frame_rate > 0:
            raise ScenarioError("frame_rate must be positive")
        self._ego = np.asarray(self.ego_trajectory, dtype=float).reshape(-1, 4)
        if np.any(np.diff(self._ego[:, 0]) <= 0):
            raise ScenarioError("ego waypoint times must strictly increase")

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.frame_rate))

    def frame_times(self) -> np.ndarray:
        return np.arange(self.n_frames) / self.frame_rate

    def ego_pose(self, t: float) -> tuple[float, float, float]:
        return _interp_pose(self._ego, t)

    def frame_geometry(self, t: float) -> GridGeometry:
        """Grid placement at time t: the grid translates with the ego, never rotates."""
        return follow_ego(self.geometry, self.ego_pose(0.0), self.ego_pose(t))

    def check_time(self, t: float) -> None:
        if not 0 <= t <= self.duration:
            raise ScenarioError(f"time {t} outside scenario duration [0, {self.duration}]")


@dataclass
class LidarScan:
    """Beam azimuths (sensor frame) and ranges; misses are NaN."""

    timestamp: float
    azimuths: np.ndarray
    ranges: np.ndarray
    max_range: float

    @property
    def hits(self) -> np.ndarray:
        return np.isfinite(self.ranges)


def ray_box_distance(origin, directions: np.ndarray, box: ObjectBox) -> np.ndarray:
    """Distance along unit ``directions`` (N, 2) from ``origin`` to the first crossing of ``box``.

    Returns +inf where the ray misses or starts inside the box.
    """
    c, s = math.cos(box.orientation), math.sin(box.orientation)
    oe, on = origin[0] - box.center_east, origin[1] - box.center_north
    ou, ov = oe * c + on * s, -oe * s + on * c
    du = directions[:, 0] * c + directions[:, 1] * s
    dv = -directions[:, 0] * s + directions[:, 1] * c
    tmin = np.full(len(directions), -np.inf)
    tmax = np.full(len(directions), np.inf)
    for o, d, h in ((ou, du, box.length / 2), (ov, dv, box.width / 2)):
        parallel = np.abs(d) < 1e-15
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-h - o) / d
            t2 = (h - o) / d
        lo = np.where(parallel, -np.inf if abs(o) <= h else np.inf, np.minimum(t1, t2))
        hi = np.where(parallel, np.inf if abs(o) <= h else -np.inf, np.maximum(t1, t2))
        tmin = np.maximum(tmin, lo)
        tmax = np.minimum(tmax, hi)
    hit = (tmax >= tmin) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


def cast_rays(origin, directions: np.ndarray, boxes: Sequence[ObjectBox]) -> np.ndarray:
    """Nearest intersection distance over all boxes (inf where nothing is hit)."""
    best = np.full(len(directions), np.inf)
    for box in boxes:
        if box.contains(origin[0], origin[1]):
            continue
        best = np.minimum(best, ray_box_distance(origin, directions, box))
    return best


def _frame_rng(seed: int, frame_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(frame_index)]))


def simulate_scan(scenario: ScenarioSpec, t: float) -> LidarScan:
    scenario.check_time(t)
    sensor = scenario.sensor
    e, n, h = scenario.ego_pose(t)
    az = sensor.azimuths()
    world = h + az
    dirs = np.stack([np.cos(world), np.sin(world)], axis=1)
    dist = cast_rays((e, n), dirs, [o.box(t) for o in scenario.objects])
    rng = _frame_rng(scenario.rng_seed, int(round(t * scenario.frame_rate)))
    noise = rng.standard_normal(len(az))
    drop = rng.random(len(az))
    ranges = dist + sensor.range_noise_sigma * noise
    valid = np.isfinite(dist) & (ranges <= sensor.max_range) & (drop >= sensor.dropout_prob)
    ranges = np.where(valid, np.maximum(ranges, 1e-6), np.nan)
    return LidarScan(float(t), az, ranges, sensor.max_range)


@numba.njit(cache=True)
def _march(gx, gy, dirs, lengths, is_hit, width, height, n_hit, n_free):
    """Amanatides-Woo traversal in grid units; counts free crossings and endpoints per cell."""
    for b in range(dirs.shape[0]):
        dx = dirs[b, 0]
        dy = dirs[b, 1]
        length = lengths[b]
        ix = int(math.floor(gx))
        iy = int(math.floor(gy))
        step_x = 1 if dx > 0 else -1
        step_y = 1 if dy > 0 else -1
        if dx != 0.0:
            next_x = (ix + 1 - gx) / dx if dx > 0 else (ix - gx) / dx
            delta_x = abs(1.0 / dx)
        else:
            next_x = math.inf
            delta_x = math.inf
        if dy != 0.0:
            next_y = (iy + 1 - gy) / dy if dy > 0 else (iy - gy) / dy
            delta_y = abs(1.0 / dy)
        else:
            next_y = math.inf
            delta_y = math.inf
        while 0 <= ix < width and 0 <= iy < height:
            exit_t = min(next_x, next_y)
            if is_hit[b]:
                if exit_t > length:
                    n_hit[iy, ix] += 1
                    break
                n_free[iy, ix] += 1
            else:
                n_free[iy, ix] += 1
                if exit_t >= length:
                    break
            if next_x < next_y:
                ix += step_x
                next_x += delta_x
            else:
                iy += step_y
                next_y += delta_y


def count_beam_cells(scan: LidarScan, geometry: GridGeometry, ego_pose) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell counts of beam endpoints (hits) and free traversals, each (H, W) int."""
    e, n, h = ego_pose
    if not geometry.contains(e, n):
        raise ScenarioError(f"ego pose ({e:.2f}, {n:.2f}) lies outside the grid")
    cs = geometry.cell_size
    gx = (e - geometry.origin[0]) / cs
    gy = (n - geometry.origin[1]) / cs
    world = h + np.asarray(scan.azimuths, dtype=float)
    dirs = np.ascontiguousarray(np.stack([np.cos(world), np.sin(world)], axis=1))
    hit = np.isfinite(scan.ranges)
    lengths = np.where(hit, scan.ranges, scan.max_range) / cs
    n_hit = np.zeros(geometry.shape, dtype=np.int64)
    n_free = np.zeros(geometry.shape, dtype=np.int64)
    _march(gx, gy, dirs, np.ascontiguousarray(lengths), hit, geometry.width_cells, geometry.height_cells,
           n_hit, n_free)
    return n_hit, n_free


def masses_from_counts(n_hit, n_free, p_hit: float = P_HIT, p_free: float = P_FREE):
    """Dempster combination of repeated per-beam evidence.

    Combining k copies of (p, 0) gives (1 - (1 - p)^k, 0); the occupied and
    free aggregates are then combined once.
    """
    occ = np.minimum(1.0 - (1.0 - p_hit) ** n_hit, _MASS_CAP)
    free = np.minimum(1.0 - (1.0 - p_free) ** n_free, _MASS_CAP)
    return ds_combine_arrays(occ, 0.0, 0.0, free)


def scan_to_measurement_grid(scan: LidarScan, geometry: GridGeometry, ego_pose,
                             p_hit: float = P_HIT, p_free: float = P_FREE) -> np.ndarray:
    """Inverse sensor model: (H, W, 2) array of (m_occ, m_free) measurement masses."""
    n_hit, n_free = count_beam_cells(scan, geometry, ego_pose)
    m_occ, m_free = masses_from_counts(n_hit, n_free, p_hit, p_free)
    return np.stack([m_occ, m_free], axis=-1)


def measure(scenario: ScenarioSpec, t: float) -> np.ndarray:
    scan = simulate_scan(scenario, t)
    s = scenario.sensor
    return scan_to_measurement_grid(scan, scenario.frame_geometry(t), scenario.ego_pose(t), s.p_hit, s.p_free)


@dataclass
class GroundTruth:
    boxes: list[ObjectBox]
    dynamic: list[bool]
    object_ids: list[int]
    cell_mask: np.ndarray

    def dynamic_boxes(self) -> list[ObjectBox]:
        return [b for b, d in zip(self.boxes, self.dynamic) if d]


def visibility(scenario: ScenarioSpec, t: float, geometry: GridGeometry | None = None) -> np.ndarray:
    """Boolean (H, W): whether a beam can reach the cell centre unobstructed at time t."""
    geometry = geometry or scenario.frame_geometry(t)
    e, n, h = scenario.ego_pose(t)
    ce, cn = geometry.center_grids()
    de, dn = (ce - e).ravel(), (cn - n).ravel()
    dist = np.hypot(de, dn)
    with np.errstate(invalid="ignore", divide="ignore"):
        dirs = np.stack([de / dist, dn / dist], axis=1)
    dirs[dist == 0] = (1.0, 0.0)
    blocked = cast_rays((e, n), dirs, [o.box(t) for o in scenario.objects])
    visible = (dist <= scenario.sensor.max_range) & (blocked >= dist)
    span = scenario.sensor.angular_span
    if span < 2 * math.pi - 1e-12:
        rel = (np.arctan2(dn, de) - h + math.pi) % (2 * math.pi) - math.pi
        visible &= np.abs(rel) <= span / 2
    return visible.reshape(geometry.shape)


def ground_truth(scenario: ScenarioSpec, t: float,
                 speed_threshold: float = STATIC_SPEED_THRESHOLD) -> GroundTruth:
    """Exact boxes and a per-cell mask of FREE / STATIC / DYNAMIC / UNOBSERVABLE.

    A cell is covered by an object when its centre lies inside the rectangle
    grown by half a cell. Covered cells take the object's label; uncovered
    cells are FREE when visible and UNOBSERVABLE otherwise.
    """
    scenario.check_time(t)
    geometry = scenario.frame_geometry(t)
    ce, cn = geometry.center_grids()
    mask = np.where(visibility(scenario, t, geometry), FREE, UNOBSERVABLE).astype(np.int8)
    boxes, flags, ids = [], [], []
    margin = geometry.cell_size / 2
    covered_static = np.zeros(geometry.shape, bool)
    covered_dynamic = np.zeros(geometry.shape, bool)
    for k, obj in enumerate(scenario.objects):
        box = obj.box(t)
        dyn = obj.kind == "dynamic" and obj.speed(t) > speed_threshold
        boxes.append(box)
        flags.append(dyn)
        ids.append(k)
        inside = box.contains(ce, cn, margin)
        if dyn:
            covered_dynamic |= inside
        else:
            covered_static |= inside
    mask[covered_static] = STATIC
    mask[covered_dynamic] = DYNAMIC
    return GroundTruth(boxes, flags, ids, mask)


# -- scenario files -----------------------------------------------------------

def scenario_from_dict(cfg: dict) -> ScenarioSpec:
    grid = dict(cfg.get("grid", {}))
    cell_size = float(grid.get("cell_size", 0.15))
    if "origin" in grid:
        geometry = GridGeometry(int(grid["width"]), int(grid["height"]), cell_size, tuple(grid["origin"]))
    else:
        size = int(grid.get("size", 301))
        geometry = GridGeometry.centered(size, cell_size, tuple(grid.get("center", (0.0, 0.0))))
    ego = cfg.get("ego", {})
    if "trajectory" in ego:
        ego_traj = [tuple(map(float, w)) for w in ego["trajectory"]]
    else:
        pose = ego.get("pose", (0.0, 0.0, 0.0))
        ego_traj = [(0.0, *map(float, pose))]
    sensor = SensorSpec(**cfg.get("sensor", {}))
    objects = [
        ObjectSpec(
            width=float(o["width"]), length=float(o["length"]), kind=o.get("kind", "dynamic"),
            trajectory=[tuple(map(float, w)) for w in o["trajectory"]], name=str(o.get("name", "")),
        )
        for o in cfg.get("objects", [])
    ]
    if not objects:
        raise ScenarioError("scenario needs at least one object or wall")
    return ScenarioSpec(
        duration=float(cfg["duration"]), frame_rate=float(cfg["frame_rate"]), geometry=geometry,
        objects=objects, sensor=sensor, ego_trajectory=ego_traj, rng_seed=int(cfg.get("rng_seed", 0)),
        name=str(cfg.get("name", "")),
    )


def load_scenario(path, grid_size: int | None = None) -> ScenarioSpec:
    path = Path(path)
    try:
        cfg = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ScenarioError(f"{path}: expected a mapping at top level")
    if grid_size is not None:
        cfg.setdefault("grid", {})
        cfg["grid"] = {k: v for k, v in cfg["grid"].items() if k not in ("width", "height", "origin")}
        cfg["grid"]["size"] = grid_size
    try:
        return scenario_from_dict(cfg)
    except KeyError as exc:
        raise ScenarioError(f"{path}: missing field {exc}") from exc


def bundled_scenario_path(name: str) -> Path:
    return Path(__file__).with_name("scenarios") / f"{name}.yaml"
