"""Particle-filter fusion of measurement grids into 7-channel DOGMa frames.

A single-map filter: each particle carries a position, a velocity and a
share of its cell's occupancy mass. Per step:

1. predict with constant velocity plus Gaussian process noise, scale weights
   by the persistence probability;
2. form the predicted cell masses (occupied = summed particle weight, free =
   decayed previous free mass) and fuse them with the measurement by
   Dempster's rule;
3. split the posterior occupied mass into a persistent part, assigned to the
   existing particles by per-cell renormalisation, and a newborn part seeded
   as fresh particles with a zero-mean velocity prior (a Gaussian mixed with a
   share of exactly-static hypotheses);
4. systematically resample cells whose particle count exceeds the budget or
   whose effective sample size dropped below half.

Particles landing in cells observed as free lose their mass in step 2-3, so
velocity hypotheses that keep predicting occupied cells survive.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .grid import (
    COV_V, M_FREE, M_OCC, N_CHANNELS, V_EAST, V_NORTH, VAR_EAST, VAR_NORTH,
    DogmaFrame, GeometryMismatchError, GridGeometry, ds_combine_arrays,
)

log = logging.getLogger(__name__)


@dataclass
class FilterConfig:
    particles_per_occupied_cell: int = 512
    birth_fraction: float = 0.01
    persistence_prob: float = 0.9
    free_persistence_prob: float = 0.8
    process_noise_pos: float = 0.03
    process_noise_vel: float = 0.05
    initial_speed_sigma: float = 4.0
    static_birth_fraction: float = 0.3
    rng_seed: int = 0
    variance_floor: float = 1e-4
    empty_cell_variance: float | None = None
    max_cell_mass: float = 0.999
    min_cell_mass: float = 1e-3
    resample_ess_fraction: float = 0.5

    def __post_init__(self):
        for name in ("birth_fraction", "persistence_prob", "free_persistence_prob", "resample_ess_fraction",
                     "static_birth_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be within [0, 1]")
        for name in ("process_noise_pos", "process_noise_vel", "initial_speed_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.particles_per_occupied_cell < 1:
            raise ValueError("particles_per_occupied_cell must be >= 1")

    @property
    def prior_variance(self) -> float:
        if self.empty_cell_variance is not None:
            return self.empty_cell_variance
        return self.initial_speed_sigma ** 2


@dataclass
class FilterState:
    geometry: GridGeometry
    config: FilterConfig
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    velocities: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    m_occ: np.ndarray | None = None
    m_free: np.ndarray | None = None
    time: float = 0.0
    ego_pose: tuple = (0.0, 0.0, 0.0)
    steps: int = 0
    rng: np.random.Generator | None = None

    def __post_init__(self):
        if self.m_occ is None:
            self.m_occ = np.zeros(self.geometry.shape)
        if self.m_free is None:
            self.m_free = np.zeros(self.geometry.shape)
        if self.rng is None:
            self.rng = np.random.default_rng(self.config.rng_seed)

    @property
    def n_particles(self) -> int:
        return len(self.weights)

    def cell_indices(self, positions: np.ndarray | None = None) -> np.ndarray:
        """Flat (north * W + east) index of each particle's cell; -1 outside the grid."""
        pos = self.positions if positions is None else positions
        i, j = self.geometry.cell_of(pos[:, 0], pos[:, 1])
        inside = (i >= 0) & (i < self.geometry.width_cells) & (j >= 0) & (j < self.geometry.height_cells)
        return np.where(inside, j * self.geometry.width_cells + i, -1)


def init_state(geometry: GridGeometry, config: FilterConfig | None = None, time: float = 0.0,
               ego_pose=(0.0, 0.0, 0.0)) -> FilterState:
    return FilterState(geometry, config or FilterConfig(), time=time, ego_pose=tuple(ego_pose))


def _shift_grid(values: np.ndarray, old: GridGeometry, new: GridGeometry) -> np.ndarray:
    from scipy import ndimage
    shift = ((old.origin[1] - new.origin[1]) / old.cell_size, (old.origin[0] - new.origin[0]) / old.cell_size)
    return ndimage.shift(values, shift, order=1, mode="constant", cval=0.0)


def _keep(state: FilterState, mask: np.ndarray) -> None:
    state.positions = state.positions[mask]
    state.velocities = state.velocities[mask]
    state.weights = state.weights[mask]


def _resample(state: FilterState, cell: np.ndarray, n_cells: int) -> None:
    """Per-cell systematic resampling of over-budget or degenerate cells."""
    cfg = state.config
    budget = cfg.particles_per_occupied_cell
    w = state.weights
    counts = np.bincount(cell, minlength=n_cells)
    wsum = np.bincount(cell, weights=w, minlength=n_cells)
    w2sum = np.bincount(cell, weights=w * w, minlength=n_cells)
    with np.errstate(invalid="ignore", divide="ignore"):
        ess = np.where(w2sum > 0, wsum ** 2 / w2sum, 0.0)
    target = (counts > budget) | ((counts > 1) & (ess < cfg.resample_ess_fraction * counts))
    if not target.any():
        return
    sel = target[cell]
    keep_idx = np.flatnonzero(~sel)
    res_idx = np.flatnonzero(sel)
    order = res_idx[np.argsort(cell[res_idx], kind="stable")]
    cells_sorted = cell[order]
    cum = np.cumsum(w[order])
    tcells = np.flatnonzero(target)
    n_new = np.minimum(counts[tcells], budget)
    first = np.searchsorted(cells_sorted, tcells, side="left")
    last = np.searchsorted(cells_sorted, tcells, side="right") - 1
    start = np.where(first > 0, cum[np.maximum(first - 1, 0)], 0.0)
    start[first == 0] = 0.0
    totals = wsum[tcells]
    rep_cell = np.repeat(np.arange(len(tcells)), n_new)
    k = np.arange(n_new.sum()) - np.repeat(np.cumsum(n_new) - n_new, n_new)
    u = state.rng.random(len(tcells))
    targets = start[rep_cell] + totals[rep_cell] * (k + u[rep_cell]) / n_new[rep_cell]
    pick = np.searchsorted(cum, targets, side="right")
    pick = np.clip(pick, first[rep_cell], last[rep_cell])
    chosen = order[pick]
    new_w = (totals / n_new)[rep_cell]
    state.positions = np.concatenate([state.positions[keep_idx], state.positions[chosen]])
    state.velocities = np.concatenate([state.velocities[keep_idx], state.velocities[chosen]])
    state.weights = np.concatenate([w[keep_idx], new_w])


def filter_step(state: FilterState, measurement: np.ndarray, dt: float,
                geometry: GridGeometry | None = None, ego_pose=None) -> tuple[FilterState, DogmaFrame]:
    """Advance the filter by ``dt`` seconds and fuse one (H, W, 2) measurement grid.

    ``geometry`` is the measurement's grid placement; it may be translated
    relative to the state's (ego-following grid) but must share its layout.
    Mutates and returns ``state`` together with the emitted frame.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    geometry = geometry or state.geometry
    measurement = np.asarray(measurement, dtype=float)
    if not geometry.same_layout(state.geometry) or measurement.shape != (*geometry.shape, 2):
        raise GeometryMismatchError(
            f"measurement grid {measurement.shape} does not match filter grid {state.geometry.shape}")
    cfg = state.config
    rng = state.rng
    if geometry != state.geometry:
        state.m_free = _shift_grid(state.m_free, state.geometry, geometry)
        state.geometry = geometry
    width = geometry.width_cells
    n_cells = geometry.n_cells

    # prediction
    n = state.n_particles
    if n:
        state.positions = (state.positions + state.velocities * dt
                           + rng.normal(0.0, cfg.process_noise_pos, (n, 2)))
        state.velocities = state.velocities + rng.normal(0.0, cfg.process_noise_vel, (n, 2))
        state.weights = state.weights * cfg.persistence_prob
    cell = state.cell_indices()
    inside = cell >= 0
    if not inside.all():
        _keep(state, inside)
        cell = cell[inside]
    wsum = np.bincount(cell, weights=state.weights, minlength=n_cells)
    over = wsum > cfg.max_cell_mass
    if over.any():
        scale = np.ones(n_cells)
        scale[over] = cfg.max_cell_mass / wsum[over]
        state.weights = state.weights * scale[cell]
        wsum = np.minimum(wsum, cfg.max_cell_mass)
    pred_occ = wsum.reshape(geometry.shape)
    pred_free = np.minimum(cfg.free_persistence_prob * state.m_free, 1.0 - pred_occ)

    # update
    meas_occ = np.minimum(measurement[..., 0], 1.0 - 1e-6)
    meas_free = np.minimum(measurement[..., 1], 1.0 - 1e-6)
    post_occ, post_free = ds_combine_arrays(pred_occ, pred_free, meas_occ, meas_free)
    p_b = cfg.birth_fraction
    denom = pred_occ + p_b * (1.0 - pred_occ)
    with np.errstate(invalid="ignore", divide="ignore"):
        born = np.where(denom > 0, post_occ * p_b * (1.0 - pred_occ) / denom, post_occ)
    born = np.where(meas_occ > 0, born, 0.0)
    persistent = (post_occ - born).ravel()
    if len(cell):
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(wsum > 0, persistent / wsum, 0.0)
        state.weights = state.weights * ratio[cell]

    # birth
    born_flat = born.ravel()
    post_flat = post_occ.ravel()
    birth_cells = np.flatnonzero(born_flat > cfg.min_cell_mass)
    if len(birth_cells):
        budget = cfg.particles_per_occupied_cell
        frac = born_flat[birth_cells] / post_flat[birth_cells]
        counts = np.clip(np.ceil(budget * frac), 1, budget).astype(np.int64)
        rep = np.repeat(birth_cells, counts)
        m = len(rep)
        ci = rep % width
        cj = rep // width
        pe, pn = geometry.cell_center(ci, cj)
        jitter = (rng.random((m, 2)) - 0.5) * geometry.cell_size
        pos = np.stack([pe, pn], axis=1) + jitter
        vel = rng.normal(0.0, cfg.initial_speed_sigma, (m, 2))
        if cfg.static_birth_fraction > 0:
            vel[rng.random(m) < cfg.static_birth_fraction] = 0.0
        w = np.repeat(born_flat[birth_cells] / counts, counts)
        state.positions = np.concatenate([state.positions, pos])
        state.velocities = np.concatenate([state.velocities, vel])
        state.weights = np.concatenate([state.weights, w])
        cell = np.concatenate([cell, rep])

    # prune negligible cells, then resample
    wsum = np.bincount(cell, weights=state.weights, minlength=n_cells)
    alive = wsum[cell] >= cfg.min_cell_mass
    if not alive.all():
        _keep(state, alive)
        cell = cell[alive]
    if len(cell):
        _resample(state, cell, n_cells)

    state.m_occ = post_occ
    state.m_free = post_free
    state.time += dt
    state.steps += 1
    if ego_pose is not None:
        state.ego_pose = tuple(ego_pose)
    return state, extract_dogma(state)


def weighted_moments(cell: np.ndarray, weights: np.ndarray, velocities: np.ndarray, n_cells: int):
    """Per-cell weighted mean, variances and covariance of particle velocities.

    Returns ``(mass, mean_e, mean_n, var_e, var_n, cov)``, all flat arrays;
    moments are zero where a cell holds no weight.
    """
    mass = np.bincount(cell, weights=weights, minlength=n_cells)
    ve, vn = velocities[:, 0], velocities[:, 1]
    se = np.bincount(cell, weights=weights * ve, minlength=n_cells)
    sn = np.bincount(cell, weights=weights * vn, minlength=n_cells)
    see = np.bincount(cell, weights=weights * ve * ve, minlength=n_cells)
    snn = np.bincount(cell, weights=weights * vn * vn, minlength=n_cells)
    sen = np.bincount(cell, weights=weights * ve * vn, minlength=n_cells)
    has = mass > 0
    inv = np.where(has, 1.0 / np.where(has, mass, 1.0), 0.0)
    me, mn = se * inv, sn * inv
    var_e = np.maximum(see * inv - me * me, 0.0)
    var_n = np.maximum(snn * inv - mn * mn, 0.0)
    cov = sen * inv - me * mn
    return mass, me, mn, var_e, var_n, cov


def extract_dogma(state: FilterState) -> DogmaFrame:
    """Current masses plus per-cell velocity statistics as a :class:`DogmaFrame`.

    Cells without particles report zero velocity and the configured prior
    variance; all variances are floored to keep the covariance non-singular.
    """
    cfg = state.config
    geometry = state.geometry
    n_cells = geometry.n_cells
    cell = state.cell_indices()
    ok = cell >= 0
    mass, me, mn, var_e, var_n, cov = weighted_moments(cell[ok], state.weights[ok], state.velocities[ok], n_cells)
    empty = mass <= 0
    var_e = np.where(empty, cfg.prior_variance, var_e)
    var_n = np.where(empty, cfg.prior_variance, var_n)
    var_e = np.maximum(var_e, cfg.variance_floor)
    var_n = np.maximum(var_n, cfg.variance_floor)
    bound = np.sqrt(var_e * var_n)
    cov = np.clip(cov, -bound, bound)
    data = np.zeros((*geometry.shape, N_CHANNELS), dtype=np.float64)
    data[..., M_OCC] = state.m_occ
    data[..., M_FREE] = state.m_free
    data[..., V_EAST] = me.reshape(geometry.shape)
    data[..., V_NORTH] = mn.reshape(geometry.shape)
    data[..., VAR_EAST] = var_e.reshape(geometry.shape)
    data[..., VAR_NORTH] = var_n.reshape(geometry.shape)
    data[..., COV_V] = cov.reshape(geometry.shape)
    data = _enforce_invariants(data)
    return DogmaFrame(geometry, data, state.time, state.ego_pose)


def _enforce_invariants(data: np.ndarray) -> np.ndarray:
    """Round-trip through float32 without violating mass sum or Cauchy-Schwarz."""
    f = data.astype(np.float32)
    mo = f[..., M_OCC].astype(np.float64)
    mf = f[..., M_FREE].astype(np.float64)
    excess = mo + mf > 1.0
    if excess.any():
        f[..., M_FREE][excess] = np.nextafter(np.float32(1.0) - f[..., M_OCC][excess], np.float32(0))
    ve = f[..., VAR_EAST].astype(np.float64)
    vn = f[..., VAR_NORTH].astype(np.float64)
    c = f[..., COV_V].astype(np.float64)
    bad = c * c > ve * vn
    if bad.any():
        f[..., COV_V][bad] = (np.sign(c[bad]) * np.sqrt(ve[bad] * vn[bad]) * (1 - 1e-6)).astype(np.float32)
    return f


def run_filter(measurements, geometries, times, config: FilterConfig | None = None,
               ego_poses=None) -> list[DogmaFrame]:
    """Filter a whole sequence of measurement grids; the first step uses the first frame period."""
    times = list(times)
    state = init_state(geometries[0], config, time=times[0] - (times[1] - times[0] if len(times) > 1 else 0.1))
    frames = []
    for k, meas in enumerate(measurements):
        dt = times[k] - state.time
        pose = ego_poses[k] if ego_poses is not None else None
        state, frame = filter_step(state, meas, dt, geometries[k], pose)
        frames.append(frame)
        log.debug("step %d: %d particles", k, state.n_particles)
    return frames
