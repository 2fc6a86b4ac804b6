"""Independent reference implementations used only by the tests."""
import math
from fractions import Fraction

import numba
import numpy as np


@numba.njit(cache=True)
def _inside(px, py, b, c, s):
    dx = px - b[0]
    dy = py - b[1]
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return abs(u) <= b[3] / 2 and abs(v) <= b[2] / 2


@numba.njit(cache=True, parallel=True)
def raster_iou(a, b, resolution=1000):
    """IoU by sampling pixel centres of a resolution x resolution raster over the union's bounding box."""
    ra = math.hypot(a[2], a[3]) / 2
    rb = math.hypot(b[2], b[3]) / 2
    x0 = min(a[0] - ra, b[0] - rb)
    x1 = max(a[0] + ra, b[0] + rb)
    y0 = min(a[1] - ra, b[1] - rb)
    y1 = max(a[1] + ra, b[1] + rb)
    hx = (x1 - x0) / resolution
    hy = (y1 - y0) / resolution
    ca, sa = math.cos(a[4]), math.sin(a[4])
    cb, sb = math.cos(b[4]), math.sin(b[4])
    inter = np.zeros(resolution, np.int64)
    union = np.zeros(resolution, np.int64)
    for i in numba.prange(resolution):
        px = x0 + (i + 0.5) * hx
        for j in range(resolution):
            py = y0 + (j + 0.5) * hy
            ia = _inside(px, py, a, ca, sa)
            ib = _inside(px, py, b, cb, sb)
            if ia and ib:
                inter[i] += 1
            if ia or ib:
                union[i] += 1
    n_union = union.sum()
    return inter.sum() / n_union if n_union else 0.0


def axis_aligned_iou(a, b):
    """Closed form for boxes with orientation 0 (length along east)."""
    ox = max(0.0, min(a[0] + a[3] / 2, b[0] + b[3] / 2) - max(a[0] - a[3] / 2, b[0] - b[3] / 2))
    oy = max(0.0, min(a[1] + a[2] / 2, b[1] + b[2] / 2) - max(a[1] - a[2] / 2, b[1] - b[2] / 2))
    inter = ox * oy
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def random_box_pairs(rng, n):
    a = np.column_stack([rng.uniform(-2, 2, n), rng.uniform(-2, 2, n), rng.uniform(0.3, 3, n),
                         rng.uniform(0.3, 5, n), rng.uniform(-math.pi, math.pi, n)])
    b = a.copy()
    b[:, :2] += rng.normal(0, 1.0, (n, 2))
    b[:, 2:4] *= rng.uniform(0.5, 1.5, (n, 2))
    b[:, 4] = rng.uniform(-math.pi, math.pi, n)
    return a, b


def brute_force_auc(scores, labels):
    """Probability that a random positive outranks a random negative (ties count half)."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, bool)
    pos, neg = s[y], s[~y]
    greater = int(np.sum(pos[:, None] > neg[None, :]))
    ties = int(np.sum(pos[:, None] == neg[None, :]))
    return (2 * greater + ties) / (2 * len(pos) * len(neg))


def brute_force_roc_area(scores, labels):
    """Trapezoidal area over (FPR, TPR) at every candidate threshold, by direct counting in exact rationals."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    pts = [(Fraction(0), Fraction(0))]
    for thr in sorted(set(s.tolist()), reverse=True):
        pred = s >= thr
        pts.append((Fraction(int(np.sum(pred & ~y)), n_neg), Fraction(int(np.sum(pred & y)), n_pos)))
    return float(sum((x1 - x0) * (y0 + y1) / 2 for (x0, y0), (x1, y1) in zip(pts, pts[1:])))


def _hull(points):
    pts = sorted(map(tuple, np.asarray(points, dtype=float)))

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and ((out[-1][0] - out[-2][0]) * (p[1] - out[-2][1])
                                     - (out[-1][1] - out[-2][1]) * (p[0] - out[-2][0])) <= 0:
                out.pop()
            out.append(p)
        return out

    lower, upper = half(pts), half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def convex_polygons_overlap(a, b) -> bool:
    """Separating-axis test for two convex polygons given as vertex arrays."""
    for poly in (a, b):
        for k in range(len(poly)):
            edge = poly[(k + 1) % len(poly)] - poly[k]
            axis = np.array([-edge[1], edge[0]])
            pa, pb = a @ axis, b @ axis
            if pa.max() <= pb.min() or pb.max() <= pa.min():
                return False
    return True


def unoccluded(sensor, box, others) -> bool:
    """True when no other box reaches into the region between the sensor and ``box``."""
    shadow = _hull(np.vstack([np.asarray(sensor, float)[None], box.corners()]))
    return not any(convex_polygons_overlap(shadow, o.corners()) for o in others)
