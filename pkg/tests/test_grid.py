import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_frame
from dogmakit.grid import (
    DogmaCell, DogmaFrame, GeometryMismatchError, GridFormatError, GridGeometry, TotalConflictError,
    ds_combine, ds_combine_arrays, grid_file_size, occupancy_probability, read_sequence, write_sequence,
)

masses = st.tuples(st.floats(0, 1), st.floats(0, 1)).map(lambda m: (m[0], m[1] * (1 - m[0])))


def test_geometry_validation():
    with pytest.raises(ValueError):
        GridGeometry(0, 3)
    with pytest.raises(ValueError):
        GridGeometry(3, 3, cell_size=0)


def test_cell_index_world_bijection():
    g = GridGeometry(7, 5, 0.15, (-1.0, 2.0))
    ii, jj = np.meshgrid(np.arange(7), np.arange(5))
    e, n = g.cell_center(ii, jj)
    bi, bj = g.cell_of(e, n)
    assert np.array_equal(bi, ii) and np.array_equal(bj, jj)


@pytest.mark.parametrize("m_occ, m_free, expected", [(1, 0, 1.0), (0, 0, 0.5), (0.6, 0.2, 0.7)])
def test_occupancy_probability_examples(m_occ, m_free, expected):
    assert occupancy_probability(DogmaCell(m_occ, m_free)) == pytest.approx(expected, abs=1e-15)


@given(masses)
def test_occupancy_probability_bounds(m):
    p = occupancy_probability(*m)
    assert 0 <= p <= 1
    if m[0] == m[1]:
        assert p == 0.5


@given(masses, st.floats(0, 0.5))
def test_occupancy_probability_monotone(m, d):
    o, f = m
    assert occupancy_probability(min(o + d, 1 - f), f) >= occupancy_probability(o, f)
    assert occupancy_probability(o, min(f + d, 1 - o)) <= occupancy_probability(o, f)


def test_ds_combine_examples():
    assert ds_combine((0.5, 0.3), (0, 0)) == pytest.approx((0.5, 0.3))
    # hand expansion: occupied = .8*.8 + .8*.2 + .2*.8, no conflict
    assert ds_combine((0.8, 0.0), (0.8, 0.0)) == pytest.approx((0.96, 0.0), abs=1e-15)
    with pytest.raises(TotalConflictError):
        ds_combine((1, 0), (0, 1))


def _symbolic_dempster(a, b):
    """Dempster's rule written out over all focal-set pairs of {O, F, OF}."""
    ma = {"O": a[0], "F": a[1], "OF": 1 - a[0] - a[1]}
    mb = {"O": b[0], "F": b[1], "OF": 1 - b[0] - b[1]}
    out = {"O": 0.0, "F": 0.0, "OF": 0.0}
    conflict = 0.0
    for x, vx in ma.items():
        for y, vy in mb.items():
            inter = "".join(sorted(set(x) & set(y), key="OF".index))
            if inter:
                out[inter] += vx * vy
            else:
                conflict += vx * vy
    return out["O"] / (1 - conflict), out["F"] / (1 - conflict)


@given(masses, masses)
def test_ds_combine_matches_symbolic_rule(a, b):
    if a[0] * b[1] + a[1] * b[0] >= 1 - 1e-9:
        return
    assert ds_combine(a, b) == pytest.approx(_symbolic_dempster(a, b), abs=1e-9)


@given(masses, masses, masses)
def test_ds_combine_commutative_associative(a, b, c):
    def k(x, y):
        return x[0] * y[1] + x[1] * y[0]

    if k(a, b) > 0.99 or k(b, c) > 0.99:
        return
    ab = ds_combine(a, b)
    bc = ds_combine(b, c)
    if k(ab, c) > 0.99 or k(a, bc) > 0.99:
        return
    assert ds_combine(a, b) == pytest.approx(ds_combine(b, a), abs=1e-12)
    assert ds_combine(ab, c) == pytest.approx(ds_combine(a, bc), abs=1e-12)
    o, f = ds_combine(a, b)
    assert o >= 0 and f >= 0 and o + f <= 1 + 1e-12
    assert ds_combine(a, (0.0, 0.0)) == pytest.approx(a, abs=1e-15)


def test_ds_combine_arrays_matches_scalar(rng):
    a = rng.random((50, 2)) * [1, 0.5]
    b = rng.random((50, 2)) * [0.5, 1]
    a[:, 1] *= 1 - a[:, 0]
    b[:, 0] *= 1 - b[:, 1]
    o, f = ds_combine_arrays(a[:, 0], a[:, 1], b[:, 0], b[:, 1])
    for k in range(50):
        assert (o[k], f[k]) == pytest.approx(ds_combine(a[k], b[k]), abs=1e-14)


def test_single_frame_round_trip(tmp_path):
    g = GridGeometry(2, 2)
    f = DogmaFrame(g, np.arange(28, dtype=float).reshape(2, 2, 7) / 28, 1.5, (0.1, 0.2, 0.3))
    write_sequence([f], tmp_path / "a.dgm")
    assert read_sequence(tmp_path / "a.dgm") == [f]


def test_bad_magic_rejected(tmp_path):
    g = GridGeometry(2, 2)
    write_sequence([DogmaFrame(g, np.zeros((2, 2, 7)))], tmp_path / "a.dgm")
    raw = bytearray((tmp_path / "a.dgm").read_bytes())
    raw[:4] = b"XXXX"
    (tmp_path / "b.dgm").write_bytes(bytes(raw))
    with pytest.raises(GridFormatError, match="magic"):
        read_sequence(tmp_path / "b.dgm")


def test_truncated_file_rejected(tmp_path):
    g = GridGeometry(3, 2)
    write_sequence([DogmaFrame(g, np.zeros((2, 3, 7)))], tmp_path / "a.dgm")
    raw = (tmp_path / "a.dgm").read_bytes()
    (tmp_path / "b.dgm").write_bytes(raw[:-5])
    with pytest.raises(GridFormatError, match="truncated"):
        read_sequence(tmp_path / "b.dgm")
    (tmp_path / "c.dgm").write_bytes(raw[:20])
    with pytest.raises(GridFormatError):
        read_sequence(tmp_path / "c.dgm")


def test_geometry_mismatch_rejected(tmp_path):
    a = DogmaFrame(GridGeometry(2, 2), np.zeros((2, 2, 7)))
    b = DogmaFrame(GridGeometry(2, 2, 0.2), np.zeros((2, 2, 7)), 1.0)
    with pytest.raises(GeometryMismatchError):
        write_sequence([a, b], tmp_path / "a.dgm")
    with pytest.raises(GeometryMismatchError):
        DogmaFrame(GridGeometry(3, 2), np.zeros((2, 2, 7)))


def test_ego_translated_sequence_round_trip(tmp_path, rng):
    g = GridGeometry.centered(5)
    frames = [random_frame(rng, g), random_frame(rng, g.translated(0.3, -0.15), 0.1, (0.3, -0.15, 0.2))]
    write_sequence(frames, tmp_path / "a.dgm")
    assert read_sequence(tmp_path / "a.dgm") == frames


def test_large_sequence_size_and_round_trip(tmp_path, rng):
    g = GridGeometry.centered(301)
    frames = [random_frame(rng, g, 0.1 * k) for k in range(100)]
    path = tmp_path / "big.dgm"
    write_sequence(frames, path)
    # 4 magic bytes + 5 u32 + 3 f64 header, then 4 f64 and W*H*7 f32 per frame
    header = 4 + 5 * 4 + 3 * 8
    expected = header + 100 * (4 * 8 + 301 * 301 * 7 * 4)
    assert path.stat().st_size == expected == grid_file_size(301, 301, 7, 100)
    assert read_sequence(path) == frames


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 3), st.integers(0, 2 ** 32 - 1))
def test_round_trip_property(tmp_path_factory, w, h, t, seed):
    rng = np.random.default_rng(seed)
    g = GridGeometry(w, h, 0.1 + rng.random(), tuple(rng.normal(size=2)))
    frames = [random_frame(rng, g, float(k)) for k in range(t)]
    path = tmp_path_factory.mktemp("rt") / "p.dgm"
    write_sequence(frames, path)
    back = read_sequence(path)
    assert back == frames
    for f in back:
        for j in range(h):
            for i in range(w):
                assert f.cell(i, j).is_valid()


def test_frames_are_immutable():
    f = DogmaFrame(GridGeometry(2, 2), np.zeros((2, 2, 7)))
    with pytest.raises(ValueError):
        f.data[0, 0, 0] = 1.0
