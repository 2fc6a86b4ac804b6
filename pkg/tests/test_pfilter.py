import numpy as np
import pytest

from conftest import mover, scenario, wall
from dogmakit.grid import GeometryMismatchError, GridGeometry
from dogmakit.pfilter import FilterConfig, FilterState, extract_dogma, filter_step, init_state, weighted_moments
from dogmakit.pipeline import run_scenario
from dogmakit.sim import DYNAMIC, STATIC


def test_weighted_moments_two_particles():
    mass, me, mn, ve, vn, cov = weighted_moments(
        np.array([0, 0]), np.array([1.0, 1.0]), np.array([[1.0, 0.0], [3.0, 0.0]]), 2)
    assert mass[0] == 2 and me[0] == 2 and mn[0] == 0
    assert ve[0] == pytest.approx(1.0) and vn[0] == 0 and cov[0] == 0
    assert mass[1] == 0 and me[1] == 0 and ve[1] == 0


def test_weighted_moments_match_numpy(rng):
    v = rng.normal(size=(50, 2))
    w = rng.uniform(0.1, 1, 50)
    _, me, mn, ve, vn, cov = weighted_moments(np.zeros(50, int), w, v, 1)
    c = np.cov(v.T, aweights=w, bias=True)
    mean = np.average(v, axis=0, weights=w)
    assert (me[0], mn[0]) == pytest.approx(tuple(mean), abs=1e-12)
    assert (ve[0], vn[0], cov[0]) == pytest.approx((c[0, 0], c[1, 1], c[0, 1]), abs=1e-12)


def test_empty_and_single_particle_cells():
    g = GridGeometry(4, 4, 1.0)
    cfg = FilterConfig()
    st = FilterState(g, cfg, positions=np.array([[1.5, 1.5]]), velocities=np.array([[2.0, -1.0]]),
                     weights=np.array([0.5]))
    _, _, _, ve, vn, _ = weighted_moments(st.cell_indices(), st.weights, st.velocities, g.n_cells)
    assert ve[1 * 4 + 1] == 0 and vn[1 * 4 + 1] == 0
    f = extract_dogma(st)
    assert f.data[1, 1, 2] == 2.0 and f.data[1, 1, 3] == -1.0
    assert f.data[1, 1, 4] == pytest.approx(cfg.variance_floor)
    assert f.data[0, 0, 2] == 0 and f.data[0, 0, 4] == pytest.approx(cfg.prior_variance)
    assert FilterConfig(empty_cell_variance=9.0).prior_variance == 9.0


def test_zero_evidence_decays_to_unknown():
    g = GridGeometry(21, 21, 0.5)
    meas = np.zeros((21, 21, 2))
    meas[5:8, 5:8, 0] = 0.9
    meas[10:15, 10:15, 1] = 0.9
    st = init_state(g, FilterConfig(rng_seed=1))
    st, _ = filter_step(st, meas, 0.1)
    for _ in range(150):
        st, f = filter_step(st, np.zeros_like(meas), 0.1)
    assert f.data[..., 0].max() < 1e-3 and f.data[..., 1].max() < 1e-3


def test_step_errors():
    g = GridGeometry(5, 5, 1.0)
    st = init_state(g)
    with pytest.raises(ValueError):
        filter_step(st, np.zeros((5, 5, 2)), 0.0)
    with pytest.raises(GeometryMismatchError):
        filter_step(st, np.zeros((5, 5, 2)), 0.1, geometry=GridGeometry(5, 5, 0.5))
    with pytest.raises(ValueError):
        FilterConfig(persistence_prob=1.5)


@pytest.fixture(scope="module")
def moving_run():
    sc = scenario([wall(0.0, 5.0, length=8.0), mover((-9.0, -4.0), (9.0, -4.0), 3.6)],
                  duration=3.6, size=151, seed=0, noise=0.02, beams=1440)
    return sc, run_scenario(sc, FilterConfig(rng_seed=0))


def test_frames_respect_cell_invariants(moving_run):
    _, run = moving_run
    for f in run.frames[::5]:
        d = f.data.astype(np.float64)
        assert np.all(d[..., 0] >= 0) and np.all(d[..., 1] >= 0)
        assert np.all(d[..., 0] + d[..., 1] <= 1.0)
        assert np.all(d[..., 4] > 0) and np.all(d[..., 5] > 0)
        assert np.all(d[..., 6] ** 2 <= d[..., 4] * d[..., 5])


def test_single_seed_convergence(moving_run):
    _, run = moving_run
    d = run.frames[30].data
    gt = run.truth[30].cell_mask
    occ = d[..., 0] > 0.5
    assert 4.0 <= d[..., 2][(gt == DYNAMIC) & occ].mean() <= 6.0
    wall_cells = (gt == STATIC) & occ
    assert np.hypot(d[..., 2], d[..., 3])[wall_cells].mean() < 0.5
    hit = run.measurements[30][..., 0] > 0
    assert d[..., 0][hit & (gt == STATIC)].mean() > 0.9


def test_deterministic(moving_run):
    sc, run = moving_run
    again = run_scenario(sc, FilterConfig(rng_seed=0), with_truth=False)
    assert all(a == b for a, b in zip(run.frames, again.frames))
