"""Anchor-based encoding of rotated boxes into per-cell label tensors and back.

Every cell carries one IoU score per anchor (size x orientation) plus
relative size offsets per anchor size and normalised angle offsets per
anchor orientation. Tensors are indexed ``[north, east, channel]`` like the
DOGMa grids.

Channel layout of the combined tensor file, in order:
    iou[alpha] for alpha = s * N_o + k  (N_s * N_o channels)
    d_width[s]                          (N_s channels)
    d_length[s]                         (N_s channels)
    d_orient[k]                         (N_o channels)
    static_map                          (1 channel)
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .boxes import ObjectBox, angle_diff_mod_pi, rotated_iou_many
from .grid import GridGeometry, GridRecord, read_grid_file, write_grid_file

DEFAULT_SIZES = (
    (0.6, 0.6), (0.6, 1.2), (0.8, 1.8), (1.0, 2.5), (1.8, 4.5),
    (2.0, 5.0), (2.2, 6.0), (2.5, 8.0), (2.6, 10.0), (2.9, 12.0),
)
DEFAULT_ORIENTATION_COUNT = 12


class BoxOutsideGridError(ValueError):
    pass


class TensorShapeError(ValueError):
    pass


@dataclass(frozen=True)
class AnchorSet:
    """Default boxes: every (width, length) size combined with every orientation.

    Anchor index ``alpha = size_index * n_orientations + orient_index``.
    """

    sizes: tuple = DEFAULT_SIZES
    orientations: tuple = tuple(k * math.pi / DEFAULT_ORIENTATION_COUNT for k in range(DEFAULT_ORIENTATION_COUNT))

    def __post_init__(self):
        sizes = tuple((float(w), float(l)) for w, l in self.sizes)
        if not sizes or any(w <= 0 or l <= 0 for w, l in sizes):
            raise ValueError("anchor sizes must be non-empty and positive")
        if not self.orientations:
            raise ValueError("need at least one anchor orientation")
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "orientations", tuple(float(o) for o in self.orientations))

    @classmethod
    def uniform(cls, sizes=DEFAULT_SIZES, n_orientations: int = DEFAULT_ORIENTATION_COUNT) -> "AnchorSet":
        """Orientations evenly spaced on [0, pi)."""
        return cls(tuple(sizes), tuple(k * math.pi / n_orientations for k in range(n_orientations)))

    @property
    def n_sizes(self) -> int:
        return len(self.sizes)

    @property
    def n_orientations(self) -> int:
        return len(self.orientations)

    @property
    def n_anchors(self) -> int:
        return self.n_sizes * self.n_orientations

    @property
    def channel_count(self) -> int:
        """Channels of the combined label tensor file."""
        return self.n_anchors + 2 * self.n_sizes + self.n_orientations + 1

    @property
    def angle_step(self) -> float:
        return math.pi / self.n_orientations

    def index(self, size_index: int, orient_index: int) -> int:
        return size_index * self.n_orientations + orient_index

    def split_index(self, alpha: int) -> tuple[int, int]:
        return divmod(int(alpha), self.n_orientations)

    def params(self) -> np.ndarray:
        """(n_anchors, 3) array of (w, l, phi) in anchor index order."""
        w = np.repeat([s[0] for s in self.sizes], self.n_orientations)
        l = np.repeat([s[1] for s in self.sizes], self.n_orientations)
        phi = np.tile(self.orientations, self.n_sizes)
        return np.stack([w, l, phi], axis=1)

    def box(self, alpha: int, east: float, north: float) -> ObjectBox:
        s, k = self.split_index(alpha)
        w, l = self.sizes[s]
        return ObjectBox(east, north, w, l, self.orientations[k])


@dataclass
class LabelTensors:
    """Per-cell detection targets (or network outputs of the same shape).

    Attributes:
        iou: (H, W, N_s * N_o) expected IoU per anchor.
        d_width, d_length: (H, W, N_s) relative size offsets.
        d_orient: (H, W, N_o) angle offsets in units of the anchor spacing.
        static_map: (H, W) static occupancy target.
    """

    iou: np.ndarray
    d_width: np.ndarray
    d_length: np.ndarray
    d_orient: np.ndarray
    static_map: np.ndarray

    HEADS = ("static_map", "iou", "d_width", "d_length", "d_orient")

    def check(self, anchors: AnchorSet, geometry: GridGeometry | None = None) -> None:
        """Raise :class:`TensorShapeError` unless shapes match the anchors (and geometry)."""
        hw = self.static_map.shape
        if geometry is not None and hw != geometry.shape:
            raise TensorShapeError(f"tensors are {hw}, geometry is {geometry.shape}")
        want = {"iou": anchors.n_anchors, "d_width": anchors.n_sizes,
                "d_length": anchors.n_sizes, "d_orient": anchors.n_orientations}
        for name, k in want.items():
            arr = getattr(self, name)
            if arr.shape != (*hw, k):
                raise TensorShapeError(f"{name} has shape {arr.shape}, expected {(*hw, k)}")

    def stack(self) -> np.ndarray:
        """All heads as one (H, W, C) array in the file channel order."""
        return np.concatenate([self.iou, self.d_width, self.d_length, self.d_orient,
                               self.static_map[..., None]], axis=-1)

    @classmethod
    def unstack(cls, data: np.ndarray, anchors: AnchorSet) -> "LabelTensors":
        data = np.asarray(data)
        if data.ndim != 3 or data.shape[-1] != anchors.channel_count:
            raise TensorShapeError(f"expected (H, W, {anchors.channel_count}) array, got {data.shape}")
        a, s, o = anchors.n_anchors, anchors.n_sizes, anchors.n_orientations
        cuts = np.cumsum([a, s, s, o])
        iou, dw, dl, do, st = np.split(data, cuts, axis=-1)
        return cls(iou, dw, dl, do, st[..., 0])

    @classmethod
    def zeros(cls, geometry: GridGeometry, anchors: AnchorSet) -> "LabelTensors":
        h, w = geometry.shape
        return cls(np.zeros((h, w, anchors.n_anchors)), np.zeros((h, w, anchors.n_sizes)),
                   np.zeros((h, w, anchors.n_sizes)), np.zeros((h, w, anchors.n_orientations)),
                   np.zeros((h, w)))


def inside_grid(box: ObjectBox, geometry: GridGeometry) -> bool:
    e0, e1, n0, n1 = geometry.extent
    c = box.corners()
    return bool(np.all((c[:, 0] >= e0) & (c[:, 0] <= e1) & (c[:, 1] >= n0) & (c[:, 1] <= n1)))


def _cell_coverage(box: ObjectBox, ce: np.ndarray, cn: np.ndarray, cell_size: float) -> np.ndarray:
    """Area of each cell square covered by the box."""
    cells = np.stack([ce, cn, np.full_like(ce, cell_size), np.full_like(ce, cell_size), np.zeros_like(ce)], 1)
    iou = rotated_iou_many(cells, box.as_array()[None])
    total = cell_size ** 2 + box.area
    return iou * total / (1.0 + iou)


def encode(boxes: Sequence[ObjectBox], geometry: GridGeometry, anchors: AnchorSet | None = None,
           static_map: np.ndarray | None = None) -> LabelTensors:
    """Encode object boxes into per-cell IoU scores and offsets.

    Only cells whose centre lies inside a box are written. Where boxes
    overlap, a cell belongs to the box covering most of its area.

    Args:
        boxes: Objects to encode; each must lie fully inside the grid.
        geometry: Grid placement.
        anchors: Anchor set, defaults to :class:`AnchorSet`.
        static_map: Optional (H, W) static target copied into the result.

    Raises:
        BoxOutsideGridError: A box extends past the grid.
    """
    anchors = anchors or AnchorSet()
    out = LabelTensors.zeros(geometry, anchors)
    if static_map is not None:
        static_map = np.asarray(static_map, dtype=float)
        if static_map.shape != geometry.shape:
            raise TensorShapeError(f"static map {static_map.shape} does not match geometry {geometry.shape}")
        out.static_map[:] = static_map
    boxes = [b.canonical() for b in boxes]
    for b in boxes:
        if not inside_grid(b, geometry):
            raise BoxOutsideGridError(f"box at ({b.center_east:.2f}, {b.center_north:.2f}) leaves the grid")
    if not boxes:
        return out
    ce, cn = geometry.center_grids()
    owner = np.full(geometry.shape, -1)
    best = np.zeros(geometry.shape)
    for k, b in enumerate(boxes):
        inside = b.contains(ce, cn)
        if not inside.any():
            continue
        cover = _cell_coverage(b, ce[inside], cn[inside], geometry.cell_size)
        take = cover > best[inside]
        sel = np.flatnonzero(inside.ravel())[take]
        owner.flat[sel] = k
        best.flat[sel] = cover[take]
    params = anchors.params()
    sizes = np.asarray(anchors.sizes)
    orients = np.asarray(anchors.orientations)
    for k, b in enumerate(boxes):
        jj, ii = np.nonzero(owner == k)
        if len(jj) == 0:
            continue
        n = len(jj)
        cells_e, cells_n = ce[jj, ii], cn[jj, ii]
        anchor_boxes = np.empty((n, anchors.n_anchors, 5))
        anchor_boxes[..., 0] = cells_e[:, None]
        anchor_boxes[..., 1] = cells_n[:, None]
        anchor_boxes[..., 2:] = params[None]
        out.iou[jj, ii] = rotated_iou_many(anchor_boxes, b.as_array()[None, None])
        out.d_width[jj, ii] = (b.width - sizes[:, 0]) / sizes[:, 0]
        out.d_length[jj, ii] = (b.length - sizes[:, 1]) / sizes[:, 1]
        out.d_orient[jj, ii] = angle_diff_mod_pi(b.orientation, orients) / anchors.angle_step
    return out


def weight_map(label: LabelTensors) -> np.ndarray:
    """Spatial weight A(c): best anchor IoU at object cells, 0 on the background."""
    return np.clip(label.iou.max(axis=-1), 0.0, 1.0)


# -- decoding ---------------------------------------------------------------------

def _candidates(out: LabelTensors, geometry: GridGeometry, anchors: AnchorSet, threshold: float):
    jj, ii, aa = np.nonzero(out.iou >= threshold)
    if len(jj) == 0:
        return np.zeros((0, 5)), np.zeros(0), np.zeros((0, 3), dtype=np.int64)
    s, k = np.divmod(aa, anchors.n_orientations)
    sizes = np.asarray(anchors.sizes)
    orients = np.asarray(anchors.orientations)
    e, n = geometry.cell_center(ii, jj)
    w = sizes[s, 0] * (1.0 + out.d_width[jj, ii, s])
    l = sizes[s, 1] * (1.0 + out.d_length[jj, ii, s])
    phi = orients[k] + out.d_orient[jj, ii, k] * anchors.angle_step
    boxes = np.stack([e, n, w, l, phi], axis=1)
    scores = out.iou[jj, ii, aa]
    keep = (w > 0) & (l > 0)
    return boxes[keep], scores[keep], np.stack([jj, ii, aa], 1)[keep]


def _fuse(boxes: np.ndarray, weights: np.ndarray) -> np.ndarray:
    wsum = weights.sum()
    e = np.dot(weights, boxes[:, 0]) / wsum
    n = np.dot(weights, boxes[:, 1]) / wsum
    w = np.dot(weights, boxes[:, 2]) / wsum
    l = np.dot(weights, boxes[:, 3]) / wsum
    # orientation is only defined modulo pi: average on the doubled angle
    phi = 0.5 * math.atan2(np.dot(weights, np.sin(2 * boxes[:, 4])), np.dot(weights, np.cos(2 * boxes[:, 4])))
    return np.array([e, n, w, l, phi])


def _refine_center(box: np.ndarray, members: np.ndarray, scores: np.ndarray, geometry: GridGeometry,
                   anchors: AnchorSet) -> np.ndarray:
    """Move the box centre so the IoU it implies at member cells fits the scores."""
    jj, ii, aa = members.T
    e, n = geometry.cell_center(ii, jj)
    anchor_boxes = np.concatenate([np.stack([e, n], 1), anchors.params()[aa]], axis=1)

    def cost(c):
        trial = np.array([c[0], c[1], box[2], box[3], box[4]])
        return float(np.sum((rotated_iou_many(anchor_boxes, trial[None]) - scores) ** 2))

    step = geometry.cell_size / 2
    simplex = np.array([box[:2], box[:2] + (step, 0.0), box[:2] + (0.0, step)])
    res = minimize(cost, box[:2], method="Nelder-Mead",
                   options={"initial_simplex": simplex, "xatol": 1e-7, "fatol": 1e-14, "maxiter": 400})
    out = box.copy()
    if res.fun <= cost(box[:2]) and np.hypot(*(res.x - box[:2])) <= geometry.cell_size:
        out[:2] = res.x
    return out


def decode(outputs: LabelTensors, geometry: GridGeometry, anchors: AnchorSet | None = None,
           score_threshold: float = 0.5, nms_iou: float = 0.3, refine_centers: bool = True) -> list[ObjectBox]:
    """Turn IoU and offset tensors into scored boxes.

    Every (cell, anchor) with IoU score at or above ``score_threshold``
    proposes a box centred on the cell. Proposals are clustered greedily
    around the highest remaining score: a proposal joins when its rotated
    IoU with the seed is at least ``nms_iou`` or its cell lies inside the
    seed box grown by one cell (small objects have low IoU between
    proposals only a cell apart). Each
    cluster yields the score-weighted mean box carrying the cluster's
    maximum score. With ``refine_centers`` the fused centre is then moved
    within one cell to best explain the cluster's IoU scores, which recovers
    sub-cell positions the cell-centred proposals cannot express.

    Raises:
        TensorShapeError: Tensors do not match anchors or geometry.
    """
    anchors = anchors or AnchorSet()
    outputs.check(anchors, geometry)
    boxes, scores, members = _candidates(outputs, geometry, anchors, score_threshold)
    if len(boxes) == 0:
        return []
    order = np.argsort(-scores, kind="stable")
    boxes, scores, members = boxes[order], scores[order], members[order]
    free = np.ones(len(boxes), bool)
    result = []
    for i in range(len(boxes)):
        if not free[i]:
            continue
        idx = np.flatnonzero(free)
        ious = rotated_iou_many(boxes[idx], boxes[i][None])
        seed = ObjectBox(*boxes[i])
        near = seed.contains(boxes[idx, 0], boxes[idx, 1], margin=geometry.cell_size)
        cluster = idx[(ious >= nms_iou) | near]
        free[cluster] = False
        fused = _fuse(boxes[cluster], scores[cluster])
        if refine_centers:
            fused = _refine_center(fused, members[cluster], scores[cluster], geometry, anchors)
        result.append(ObjectBox(*map(float, fused), score=float(scores[i])).canonical())
    return result


# -- tensor files -----------------------------------------------------------------

def write_label_tensors(path, tensors: Sequence[LabelTensors], geometry: GridGeometry, anchors: AnchorSet,
                        timestamps=None, ego_poses=None) -> None:
    """Store a sequence of label tensors in the grid container (float32)."""
    records = []
    for k, t in enumerate(tensors):
        t.check(anchors, geometry)
        ts = float(timestamps[k]) if timestamps is not None else float(k)
        pose = tuple(ego_poses[k]) if ego_poses is not None else (0.0, 0.0, 0.0)
        records.append(GridRecord(ts, pose, t.stack().astype(np.float32)))
    write_grid_file(path, geometry, records, anchors.channel_count)


def read_label_tensors(path, anchors: AnchorSet | None = None):
    """Returns (geometry, list of LabelTensors, timestamps, ego poses)."""
    anchors = anchors or AnchorSet()
    gf = read_grid_file(path)
    if gf.channel_count != anchors.channel_count:
        raise TensorShapeError(
            f"{path}: {gf.channel_count} channels, anchor set needs {anchors.channel_count}")
    tensors = [LabelTensors.unstack(r.data.astype(np.float64), anchors) for r in gf.records]
    return gf.geometry, tensors, [r.timestamp for r in gf.records], [r.ego_pose for r in gf.records]


def anchors_from_dict(cfg: dict | None) -> AnchorSet:
    """Build an anchor set from ``{"sizes": [[w, l], ...], "orientations": n or [phi, ...]}``."""
    cfg = cfg or {}
    sizes = tuple(tuple(s) for s in cfg.get("sizes", DEFAULT_SIZES))
    orients = cfg.get("orientations", DEFAULT_ORIENTATION_COUNT)
    if isinstance(orients, int):
        return AnchorSet.uniform(sizes, orients)
    return AnchorSet(sizes, tuple(float(o) for o in orients))
