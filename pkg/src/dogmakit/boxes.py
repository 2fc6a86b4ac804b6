"""Rotated rectangles: corners, IoU by convex polygon clipping, minimum-area enclosing rectangle."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numba
import numpy as np

HALF_PI = math.pi / 2


def canonical_angle(phi):
    """Orientation of a rectangle modulo pi, in [-pi/2, pi/2)."""
    return (np.asarray(phi, dtype=float) + HALF_PI) % math.pi - HALF_PI


def angle_diff_mod_pi(a, b):
    """Signed difference a - b modulo pi, in [-pi/2, pi/2)."""
    return canonical_angle(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))


@dataclass(frozen=True)
class ObjectBox:
    """Rotated rectangle; ``length`` runs along ``orientation``, ``width`` across it."""

    center_east: float
    center_north: float
    width: float
    length: float
    orientation: float = 0.0
    score: Optional[float] = None

    def __post_init__(self):
        for name in ("center_east", "center_north", "width", "length"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.score is not None:
            object.__setattr__(self, "score", float(self.score))
        if not (self.width > 0 and self.length > 0):
            raise ValueError(f"box extents must be positive, got w={self.width}, l={self.length}")
        object.__setattr__(self, "orientation", float(canonical_angle(self.orientation)))

    @property
    def center(self) -> tuple[float, float]:
        return (self.center_east, self.center_north)

    @property
    def area(self) -> float:
        return self.width * self.length

    def canonical(self) -> "ObjectBox":
        """Same point set with width <= length."""
        if self.width <= self.length:
            return self
        return replace(self, width=self.length, length=self.width, orientation=self.orientation + HALF_PI)

    def corners(self) -> np.ndarray:
        return box_corners(self.as_array())

    def as_array(self) -> np.ndarray:
        return np.array([self.center_east, self.center_north, self.width, self.length, self.orientation])

    def contains(self, east, north, margin: float = 0.0):
        """Whether points lie inside the rectangle grown by ``margin`` on every side."""
        c, s = math.cos(self.orientation), math.sin(self.orientation)
        de = np.asarray(east) - self.center_east
        dn = np.asarray(north) - self.center_north
        u = de * c + dn * s
        v = -de * s + dn * c
        return (np.abs(u) <= self.length / 2 + margin) & (np.abs(v) <= self.width / 2 + margin)


def boxes_to_array(boxes: Sequence[ObjectBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 5))
    return np.stack([b.as_array() for b in boxes])


def box_corners(params: np.ndarray) -> np.ndarray:
    """Counter-clockwise corners for (..., 5) arrays of (e, n, w, l, phi) -> (..., 4, 2)."""
    params = np.asarray(params, dtype=float)
    e, n, w, l, phi = np.moveaxis(params, -1, 0)
    c, s = np.cos(phi), np.sin(phi)
    hu = np.stack([c * l / 2, s * l / 2], axis=-1)
    hv = np.stack([-s * w / 2, c * w / 2], axis=-1)
    ctr = np.stack([e, n], axis=-1)
    return np.stack([ctr - hu - hv, ctr + hu - hv, ctr + hu + hv, ctr - hu + hv], axis=-2)


@numba.njit(cache=True)
def _corners(e, n, w, l, phi, out):
    c = math.cos(phi)
    s = math.sin(phi)
    ux, uy = c * l / 2, s * l / 2
    vx, vy = -s * w / 2, c * w / 2
    out[0, 0] = e - ux - vx
    out[0, 1] = n - uy - vy
    out[1, 0] = e + ux - vx
    out[1, 1] = n + uy - vy
    out[2, 0] = e + ux + vx
    out[2, 1] = n + uy + vy
    out[3, 0] = e - ux + vx
    out[3, 1] = n - uy + vy


@numba.njit(cache=True)
def _polygon_area(poly, count):
    acc = 0.0
    for i in range(count):
        j = (i + 1) % count
        acc += poly[i, 0] * poly[j, 1] - poly[j, 0] * poly[i, 1]
    return 0.5 * acc


@numba.njit(cache=True)
def _clip_intersection_area(subject, clip):
    """Area of the intersection of two convex CCW quadrilaterals (Sutherland-Hodgman)."""
    buf_a = np.empty((16, 2))
    buf_b = np.empty((16, 2))
    for i in range(4):
        buf_a[i, 0] = subject[i, 0]
        buf_a[i, 1] = subject[i, 1]
    count = 4
    for k in range(4):
        if count == 0:
            return 0.0
        ax, ay = clip[k, 0], clip[k, 1]
        bx, by = clip[(k + 1) % 4, 0], clip[(k + 1) % 4, 1]
        ex, ey = bx - ax, by - ay
        out = 0
        for i in range(count):
            px, py = buf_a[i, 0], buf_a[i, 1]
            qx, qy = buf_a[(i + 1) % count, 0], buf_a[(i + 1) % count, 1]
            dp = ex * (py - ay) - ey * (px - ax)
            dq = ex * (qy - ay) - ey * (qx - ax)
            if dp >= 0.0:
                buf_b[out, 0] = px
                buf_b[out, 1] = py
                out += 1
                if dq < 0.0:
                    t = dp / (dp - dq)
                    buf_b[out, 0] = px + t * (qx - px)
                    buf_b[out, 1] = py + t * (qy - py)
                    out += 1
            elif dq >= 0.0:
                t = dp / (dp - dq)
                buf_b[out, 0] = px + t * (qx - px)
                buf_b[out, 1] = py + t * (qy - py)
                out += 1
        for i in range(out):
            buf_a[i, 0] = buf_b[i, 0]
            buf_a[i, 1] = buf_b[i, 1]
        count = out
    if count < 3:
        return 0.0
    area = _polygon_area(buf_a, count)
    return area if area > 0.0 else 0.0


@numba.njit(cache=True)
def _iou_pairs(a, b, out):
    ca = np.empty((4, 2))
    cb = np.empty((4, 2))
    for k in range(a.shape[0]):
        same = True
        for m in range(5):
            if a[k, m] != b[k, m]:
                same = False
                break
        if same:
            out[k] = 1.0
            continue
        ra = math.hypot(a[k, 2], a[k, 3]) / 2
        rb = math.hypot(b[k, 2], b[k, 3]) / 2
        if math.hypot(a[k, 0] - b[k, 0], a[k, 1] - b[k, 1]) >= ra + rb:
            out[k] = 0.0
            continue
        _corners(a[k, 0], a[k, 1], a[k, 2], a[k, 3], a[k, 4], ca)
        _corners(b[k, 0], b[k, 1], b[k, 2], b[k, 3], b[k, 4], cb)
        inter = _clip_intersection_area(ca, cb)
        union = a[k, 2] * a[k, 3] + b[k, 2] * b[k, 3] - inter
        v = inter / union
        out[k] = min(1.0, max(0.0, v))


def rotated_iou_many(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU for broadcastable arrays of (e, n, w, l, phi) rows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a, b = np.broadcast_arrays(a, b)
    shape = a.shape[:-1]
    a2 = np.ascontiguousarray(a.reshape(-1, 5))
    b2 = np.ascontiguousarray(b.reshape(-1, 5))
    if np.any(a2[:, 2:4] <= 0) or np.any(b2[:, 2:4] <= 0):
        raise ValueError("rotated IoU of a degenerate zero-area box")
    out = np.empty(a2.shape[0])
    _iou_pairs(a2, b2, out)
    return out.reshape(shape)


def rotated_iou(a: ObjectBox, b: ObjectBox) -> float:
    """Jaccard index of two rotated rectangles."""
    return float(rotated_iou_many(a.as_array()[None], b.as_array()[None])[0])


def pairwise_iou(boxes_a: Sequence[ObjectBox], boxes_b: Sequence[ObjectBox]) -> np.ndarray:
    if not boxes_a or not boxes_b:
        return np.zeros((len(boxes_a), len(boxes_b)))
    pa = boxes_to_array(boxes_a)
    pb = boxes_to_array(boxes_b)
    return rotated_iou_many(pa[:, None, :], pb[None, :, :])


# -- hull and minimum-area rectangle ------------------------------------------

def convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain hull, counter-clockwise, without repeated endpoint."""
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def min_area_rectangle(points: np.ndarray, tie_tolerance: float = 0.05) -> ObjectBox:
    """Smallest enclosing rotated rectangle, found by rotating calipers over hull edges.

    Orientations whose area is within ``tie_tolerance`` (relative) of the
    minimum count as ties; among those the rectangle whose edges the points
    hug most closely wins. This matters for L-shaped views of a box, whose
    hull is nearly a right triangle: the rectangle on the hypotenuse has the
    same area as the true one.

    Returns a canonical box (width <= length).
    """
    pts = np.asarray(points, dtype=float)
    hull = convex_hull(pts)
    if len(hull) < 3:
        raise ValueError("need at least three non-collinear points")
    edges = np.roll(hull, -1, axis=0) - hull
    angles = np.arctan2(edges[:, 1], edges[:, 0])
    # one caliper orientation per edge, modulo pi/2
    angles = np.unique(np.round(angles % HALF_PI, 12))
    c, s = np.cos(angles), np.sin(angles)
    u = hull[:, 0][None, :] * c[:, None] + hull[:, 1][None, :] * s[:, None]
    v = -hull[:, 0][None, :] * s[:, None] + hull[:, 1][None, :] * c[:, None]
    umin, umax = u.min(axis=1), u.max(axis=1)
    vmin, vmax = v.min(axis=1), v.max(axis=1)
    area = (umax - umin) * (vmax - vmin)
    ties = np.flatnonzero(area <= area.min() * (1 + tie_tolerance))
    if len(ties) == 1:
        k = int(ties[0])
    else:
        pu = pts[:, 0][None, :] * c[ties, None] + pts[:, 1][None, :] * s[ties, None]
        pv = -pts[:, 0][None, :] * s[ties, None] + pts[:, 1][None, :] * c[ties, None]
        gap = np.minimum.reduce([pu - umin[ties, None], umax[ties, None] - pu,
                                 pv - vmin[ties, None], vmax[ties, None] - pv])
        k = int(ties[np.argmin(gap.mean(axis=1))])
    uc = (umax[k] + umin[k]) / 2
    vc = (vmax[k] + vmin[k]) / 2
    e = uc * c[k] - vc * s[k]
    n = uc * s[k] + vc * c[k]
    return ObjectBox(float(e), float(n), float(vmax[k] - vmin[k]), float(umax[k] - umin[k]), float(angles[k])).canonical()


def cells_rectangle(east_idx: np.ndarray, north_idx: np.ndarray, cell_size: float,
                    origin=(0.0, 0.0)) -> ObjectBox:
    """Minimum-area rectangle enclosing a set of grid cells (their full squares)."""
    e0 = origin[0] + np.asarray(east_idx) * cell_size
    n0 = origin[1] + np.asarray(north_idx) * cell_size
    corners = np.concatenate([
        np.stack([e0, n0], 1), np.stack([e0 + cell_size, n0], 1),
        np.stack([e0, n0 + cell_size], 1), np.stack([e0 + cell_size, n0 + cell_size], 1),
    ])
    return min_area_rectangle(corners)
