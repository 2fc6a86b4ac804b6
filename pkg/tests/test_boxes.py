import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import axis_aligned_iou, random_box_pairs, raster_iou
from dogmakit.boxes import (
    ObjectBox, angle_diff_mod_pi, canonical_angle, cells_rectangle, convex_hull, min_area_rectangle,
    pairwise_iou, rotated_iou, rotated_iou_many,
)

box_st = st.builds(ObjectBox, st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 4), st.floats(0.1, 6),
                   st.floats(-4, 4))


def test_canonical_angle_range():
    phi = np.linspace(-10, 10, 1001)
    c = canonical_angle(phi)
    assert np.all((c >= -math.pi / 2) & (c < math.pi / 2))
    assert np.allclose(np.sin(2 * c), np.sin(2 * phi))


def test_box_rejects_degenerate():
    with pytest.raises(ValueError):
        ObjectBox(0, 0, 0.0, 1.0)


def test_identical_and_disjoint():
    a = ObjectBox(1, 2, 1.5, 4, 0.3)
    assert rotated_iou(a, a) == 1.0
    assert rotated_iou(a, ObjectBox(20, 2, 1.5, 4, 0.3)) == 0.0


def test_unit_offset_squares():
    assert rotated_iou(ObjectBox(0, 0, 2, 2), ObjectBox(1, 0, 2, 2)) == pytest.approx(2 / 6, abs=1e-12)


def test_same_point_set_different_parameters():
    a = ObjectBox(0, 0, 1, 3, 0.2)
    assert rotated_iou(a, ObjectBox(0, 0, 3, 1, 0.2 + math.pi / 2)) == pytest.approx(1.0, abs=1e-12)
    assert rotated_iou(a, ObjectBox(0, 0, 1, 3, 0.2 + math.pi)) == pytest.approx(1.0, abs=1e-12)


def test_axis_aligned_closed_form(rng):
    a, b = random_box_pairs(rng, 500)
    a[:, 4] = 0
    b[:, 4] = 0
    got = rotated_iou_many(a, b)
    want = [axis_aligned_iou(x, y) for x, y in zip(a, b)]
    assert np.max(np.abs(got - want)) < 1e-9


def test_raster_oracle_sample(rng):
    a, b = random_box_pairs(rng, 100)
    got = rotated_iou_many(a, b)
    want = np.array([raster_iou(x, y) for x, y in zip(a, b)])
    assert np.max(np.abs(got - want)) < 5e-3


@given(box_st, box_st)
def test_symmetric_and_bounded(a, b):
    ab, ba = rotated_iou(a, b), rotated_iou(b, a)
    assert 0 <= ab <= 1
    assert ab == pytest.approx(ba, abs=1e-12)


@given(box_st, box_st, st.floats(-10, 10), st.floats(-10, 10), st.floats(-math.pi, math.pi))
def test_rigid_transform_invariance(a, b, te, tn, rot):
    c, s = math.cos(rot), math.sin(rot)

    def move(x):
        return ObjectBox(c * x.center_east - s * x.center_north + te, s * x.center_east + c * x.center_north + tn,
                         x.width, x.length, x.orientation + rot)

    assert rotated_iou(move(a), move(b)) == pytest.approx(rotated_iou(a, b), abs=1e-9)


def test_degenerate_array_input_raises():
    with pytest.raises(ValueError):
        rotated_iou_many(np.array([[0, 0, 0, 1, 0.0]]), np.array([[0, 0, 1, 1, 0.0]]))


def test_pairwise_shape():
    a = [ObjectBox(0, 0, 1, 2), ObjectBox(5, 0, 1, 2)]
    m = pairwise_iou(a, a[:1])
    assert m.shape == (2, 1)
    assert m[0, 0] == 1 and m[1, 0] == 0


def test_contains_margin():
    b = ObjectBox(0, 0, 2, 4, 0)
    assert b.contains(1.9, 0.9)
    assert not b.contains(2.1, 0)
    assert b.contains(2.1, 0, margin=0.2)


def test_convex_hull_square_with_interior():
    pts = np.array([[0, 0], [1, 0], [1, 1], [0, 1], [0.5, 0.5], [0.2, 0.7]])
    hull = convex_hull(pts)
    assert len(hull) == 4


def _brute_min_rect_area(points, steps=20000):
    ang = np.linspace(0, math.pi / 2, steps, endpoint=False)
    c, s = np.cos(ang), np.sin(ang)
    u = points[:, 0][None] * c[:, None] + points[:, 1][None] * s[:, None]
    v = -points[:, 0][None] * s[:, None] + points[:, 1][None] * c[:, None]
    return np.min((u.max(1) - u.min(1)) * (v.max(1) - v.min(1)))


def test_min_area_rectangle_against_angle_sweep(rng):
    for _ in range(20):
        pts = rng.normal(size=(30, 2)) * rng.uniform(0.5, 3, 2)
        r = min_area_rectangle(pts)
        assert r.area <= _brute_min_rect_area(pts) * (1 + 0.05) + 1e-12
        # every point is covered
        assert np.all(r.contains(pts[:, 0], pts[:, 1], margin=1e-9))
        assert r.width <= r.length


def test_min_area_rectangle_recovers_rotated_rectangle():
    box = ObjectBox(1.0, -2.0, 1.5, 4.0, 0.4)
    r = min_area_rectangle(box.corners())
    assert rotated_iou(r, box) == pytest.approx(1.0, abs=1e-9)


def test_min_area_rectangle_prefers_edges_of_l_shape():
    # two visible faces of a 1.8 x 4.5 rectangle rotated by 30 degrees
    box = ObjectBox(0, 0, 1.8, 4.5, math.radians(30))
    c = box.corners()
    t = np.linspace(0, 1, 40)[:, None]
    pts = np.concatenate([c[0] + t * (c[1] - c[0]), c[1] + t * (c[2] - c[1])])
    r = min_area_rectangle(pts)
    assert abs(angle_diff_mod_pi(r.orientation, box.orientation)) < 1e-6


def test_cells_rectangle_axis_aligned_blob():
    jj, ii = np.mgrid[0:4, 0:10]
    r = cells_rectangle(ii.ravel(), jj.ravel(), 0.15)
    assert (r.width, r.length) == pytest.approx((0.6, 1.5), abs=1e-12)
    assert r.orientation == pytest.approx(0.0, abs=1e-12)
