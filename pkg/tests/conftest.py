import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dogmakit.grid import DogmaFrame, GridGeometry
from dogmakit.sim import ObjectSpec, ScenarioSpec, SensorSpec

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_frame(rng, geometry, timestamp=0.0, ego_pose=(0.0, 0.0, 0.0)):
    """Frame with valid random masses and velocity statistics."""
    h, w = geometry.shape
    data = np.zeros((h, w, 7))
    m_occ = rng.random((h, w))
    data[..., 0] = m_occ
    data[..., 1] = rng.random((h, w)) * (1 - m_occ)
    data[..., 2:4] = rng.normal(0, 3, (h, w, 2))
    ve = rng.random((h, w)) + 1e-3
    vn = rng.random((h, w)) + 1e-3
    data[..., 4] = ve
    data[..., 5] = vn
    data[..., 6] = (rng.random((h, w)) * 2 - 1) * 0.9 * np.sqrt(ve * vn)
    return DogmaFrame(geometry, data, timestamp, ego_pose)


def scenario(objects, duration=3.0, size=101, seed=0, noise=0.0, beams=720, max_range=30.0, ego=(0.0, 0.0, 0.0)):
    return ScenarioSpec(
        duration=duration, frame_rate=10.0, geometry=GridGeometry.centered(size),
        objects=objects, sensor=SensorSpec(beam_count=beams, range_noise_sigma=noise, max_range=max_range),
        ego_trajectory=[(0.0, *ego)], rng_seed=seed,
    )


def wall(east, north, width=0.4, length=10.0, heading=0.0, name="wall"):
    return ObjectSpec(width, length, "static", [(0.0, east, north, heading)], name)


def mover(start, end, t_end, width=1.8, length=4.5, heading=0.0, name="car"):
    return ObjectSpec(width, length, "dynamic", [(0.0, *start, heading), (t_end, *end, heading)], name)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
