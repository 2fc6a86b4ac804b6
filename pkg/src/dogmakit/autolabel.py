"""Offline label generation from a whole DOGMa sequence.

Pipeline: align frames to a common world frame, classify cells from the
rise/fall pattern of their occupancy probability, fit rectangles to the
dynamic regions of each frame, associate them into tracks whose size and
orientation are refined over the whole track, prune implausible tracks and
finally emit the static-occupancy map and box labels per frame.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .boxes import ObjectBox, canonical_angle, cells_rectangle
from .grid import (
    VAR_EAST, VAR_NORTH, DogmaFrame, GridGeometry, GridRecord,
    read_grid_file, stack_occupancy, write_grid_file,
)


@dataclass
class AutolabelConfig:
    """Thresholds for classification, rectangle fitting and track refinement.

    Attributes:
        p_high, p_low: Hysteresis thresholds on P_O for the rise and the fall.
        score_threshold: Dynamic label threshold on the soft score.
        fall_hold: Frames after a fall during which P_O must stay below
            ``p_high`` for the fall to count.
        max_dwell_frames: Occupations longer than this get a reduced score.
        coherence_*: Rules for promoting unfinished episodes that continue a
            neighbouring completed one (objects still moving at the end).
        fit_min_occupancy: Minimum P_O of dynamic cells used for rectangles.
        merge_radius: Cells bridged when grouping dynamic cells into objects.
        extent_bias_cells: Cells subtracted from the percentile size, which
            otherwise overshoots by the blur of the occupancy edges.
        smoothing_window: Frames used to smooth centres before speed and
            acceleration gates.
    """

    p_high: float = 0.7
    p_low: float = 0.4
    score_threshold: float = 0.5
    coherence_radius: int = 2
    coherence_max_gap: int = 10
    coherence_score_scale: float = 0.75
    coherence_back_slack: int = 2
    fall_hold: int = 5
    max_dwell_frames: int = 30
    coherence_seed_score: float = 0.9
    min_cells: int = 4
    merge_radius: int = 2
    fit_min_occupancy: float = 0.55
    gate_distance: float = 2.5
    shape_percentile: float = 90.0
    extent_bias_cells: float = 1.0
    orientation_from_motion_speed: float = 0.5
    orientation_window: int = 7
    min_track_length: int = 3
    max_speed: float = 15.0
    max_accel: float = 10.0
    smoothing_window: int = 7

    def __post_init__(self):
        if not 0 <= self.p_low < self.p_high <= 1:
            raise ValueError("need 0 <= p_low < p_high <= 1")


@dataclass
class CellClassification:
    """Per-frame dynamic scores and labels; NaN marks cells that are not observed occupied.

    ``dynamic`` covers observed-occupied cells only. ``moving`` also includes
    cells inside a dynamic episode whose occupancy sagged below ``p_high``
    but stayed above ``fit_min_occupancy`` (grazing views of long faces), and
    is what shape fitting uses.
    """

    score: np.ndarray
    dynamic: np.ndarray
    applicable: np.ndarray
    aggregate_dynamic: np.ndarray
    threshold: float
    moving: np.ndarray

    @property
    def static(self) -> np.ndarray:
        return self.applicable & ~self.dynamic


@dataclass
class Track:
    track_id: int
    frames: list[int]
    raw_boxes: list[ObjectBox]
    boxes: list[ObjectBox] = field(default_factory=list)
    width: float = 0.0
    length: float = 0.0
    valid: bool = True
    reason: str = ""

    def box_at(self, frame: int) -> ObjectBox | None:
        try:
            return self.boxes[self.frames.index(frame)]
        except ValueError:
            return None


# -- ego alignment ---------------------------------------------------------------

def ego_align(frames: Sequence[DogmaFrame]) -> list[DogmaFrame]:
    """Resample every frame into the grid placement of frame 0.

    The grid translates with the ego and is always east/north aligned, so
    alignment is a (possibly fractional) translation by the ego displacement
    since frame 0; fractional shifts use bilinear interpolation and cells
    uncovered by the shift become unknown.
    """
    if not frames:
        return []
    for f in frames:
        if f.ego_pose is None or len(f.ego_pose) != 3:
            raise ValueError("every frame needs an ego pose for alignment")
    ref = frames[0]
    cs = ref.geometry.cell_size
    out = [ref]
    for f in frames[1:]:
        d_east = (f.ego_pose[0] - ref.ego_pose[0]) / cs
        d_north = (f.ego_pose[1] - ref.ego_pose[1]) / cs
        if d_east == 0 and d_north == 0:
            out.append(f)
            continue
        data = np.asarray(f.data, dtype=np.float64)
        if float(d_east).is_integer() and float(d_north).is_integer():
            shifted = ndimage.shift(data, (d_north, d_east, 0), order=0, mode="constant", cval=0.0)
        else:
            shifted = ndimage.shift(data, (d_north, d_east, 0), order=1, mode="constant", cval=0.0)
        floor = 1e-4
        shifted[..., VAR_EAST] = np.maximum(shifted[..., VAR_EAST], floor)
        shifted[..., VAR_NORTH] = np.maximum(shifted[..., VAR_NORTH], floor)
        out.append(DogmaFrame(ref.geometry, shifted, f.timestamp, f.ego_pose))
    return out


# -- cell classification ---------------------------------------------------------

def _episodes(p: np.ndarray, cfg: AutolabelConfig):
    """Hysteresis scan of P_O over time for all cells at once.

    Returns the (T, N) episode index per frame (-1 outside episodes) and
    per-episode rise strength, fall strength, completed flag, cell, rise
    frame and end frame.
    """
    t_len = p.shape[0]
    flat = p.reshape(t_len, -1)
    # a fall only counts if occupancy does not come straight back: short dips
    # on static surfaces are sensor noise, not an object leaving
    ahead = np.full_like(flat, np.inf)
    ahead[:-1] = -np.inf
    for d in range(1, cfg.fall_hold + 1):
        ahead[:-d] = np.maximum(ahead[:-d], flat[d:])
    # level the cell settles at after a fall: mean over the fall frame and the hold window
    csum = np.concatenate([np.zeros((1, flat.shape[1])), np.cumsum(flat, axis=0)])
    stop = np.minimum(np.arange(t_len) + cfg.fall_hold + 1, t_len)
    settled = (csum[stop] - csum[:t_len]) / (stop - np.arange(t_len))[:, None]
    n = flat.shape[1]
    span = cfg.p_high - cfg.p_low
    high = np.zeros(n, bool)
    base = np.full(n, 0.5)  # every cell starts out unknown
    episode_id = np.full((t_len, n), -1, dtype=np.int64)
    next_id = 0
    cur_id = np.full(n, -1, dtype=np.int64)
    ep_score = []
    ep_cell = []
    ep_rise = []
    fall_events = []
    for t in range(t_len):
        x = flat[t]
        low_now = ~high
        base = np.where(low_now, np.minimum(base, x), base)
        start = low_now & (x >= cfg.p_high)
        if start.any():
            idx = np.flatnonzero(start)
            ids = np.arange(next_id, next_id + len(idx))
            next_id += len(idx)
            cur_id[idx] = ids
            high[idx] = True
            ep_score.append(np.clip((x[idx] - base[idx]) / span, 0, 1))
            ep_cell.append(idx)
            ep_rise.append(np.full(len(idx), t))
        fall = high & (x < cfg.p_low) & (ahead[t] < cfg.p_high)
        if fall.any():
            idx = np.flatnonzero(fall)
            high[idx] = False
            base[idx] = x[idx]
            fall_ids = cur_id[idx]
            cur_id[idx] = -1
            fall_events.append((fall_ids, t, np.clip((cfg.p_high - settled[t, idx]) / span, 0, 1)))
        episode_id[t] = cur_id
    # assemble episode tables
    n_ep = next_id
    rise_strength = np.zeros(n_ep)
    cells = np.zeros(n_ep, dtype=np.int64)
    rises = np.zeros(n_ep, dtype=np.int64)
    ends = np.full(n_ep, t_len, dtype=np.int64)
    fell = np.zeros(n_ep, bool)
    fall_strength = np.zeros(n_ep)
    k = 0
    for s, c, r in zip(ep_score, ep_cell, ep_rise):
        rise_strength[k:k + len(s)] = s
        cells[k:k + len(s)] = c
        rises[k:k + len(s)] = r
        k += len(s)
    for ids, t, strength in fall_events:
        fell[ids] = True
        ends[ids] = t
        fall_strength[ids] = strength
    return episode_id, rise_strength, fall_strength, fell, cells, rises, ends


def classify_cells(frames_or_po, config: AutolabelConfig | None = None) -> CellClassification:
    """Label observed-occupied cells as static or dynamic from their P_O time series.

    A rise above ``p_high`` later followed by a fall below ``p_low`` marks the
    occupied interval dynamic. Its score is min(rise, fall) strength times a
    dwell factor. Rise strength is the normalised swing up from the level
    before the rise. Fall strength is how far below ``p_high`` the cell settles
    over the hold window, so a one-frame dip on a static surface scores low.
    Occupations longer than ``max_dwell_frames`` are scaled down. A rise
    that never falls is static unless a neighbouring cell completed a
    rise/fall episode spanning this cell's rise (the object moved on into
    it); such cells and their coherent unfinished neighbours are dynamic
    with a reduced score.

    Accepts aligned :class:`DogmaFrame` objects or a (T, H, W) P_O array;
    only occupancy is used, never the velocity channels.
    """
    cfg = config or AutolabelConfig()
    if isinstance(frames_or_po, np.ndarray):
        p = np.asarray(frames_or_po, dtype=np.float64)
    else:
        p = stack_occupancy(frames_or_po).astype(np.float64)
    if p.ndim != 3 or p.shape[0] < 3:
        raise ValueError("classification needs a sequence of at least 3 frames")
    # trailing frames without any evidence carry no information; classify
    # without them so the result does not depend on padding
    informative = np.flatnonzero((p != 0.5).any(axis=(1, 2)))
    keep = max(3, int(informative[-1]) + 1 if len(informative) else 0)
    if keep < p.shape[0]:
        res = classify_cells(p[:keep], cfg)
        pad = p.shape[0] - keep

        def ext(a, fill):
            return np.concatenate([a, np.full((pad, *a.shape[1:]), fill, dtype=a.dtype)])

        return CellClassification(ext(res.score, np.nan), ext(res.dynamic, False), ext(res.applicable, False),
                                  res.aggregate_dynamic, res.threshold, ext(res.moving, False))
    t_len, h, w = p.shape
    episode_id, rise_s, fall_s, fell, cells, rises, ends = _episodes(p, cfg)
    n_ep = len(rise_s)
    # long occupation that eventually ends looks like a parked object
    dwell = np.minimum(1.0, cfg.max_dwell_frames / np.maximum(ends - rises, 1))
    ep_score = np.where(fell, np.minimum(rise_s, fall_s) * dwell, 0.0)

    open_eps = np.flatnonzero(~fell)
    if len(open_eps):
        ep_score = _coherence(ep_score, fell, cells, rises, ends, open_eps, (h, w), cfg)

    applicable = p >= cfg.p_high
    eid = episode_id.reshape(t_len, h, w)
    score = np.full((t_len, h, w), np.nan)
    in_ep = eid >= 0
    if n_ep:
        score[in_ep] = ep_score[eid[in_ep]]
    moving = (np.nan_to_num(score, nan=0.0) >= cfg.score_threshold) & (p >= cfg.fit_min_occupancy)
    score[~applicable] = np.nan
    applicable &= in_ep
    dynamic = applicable & moving
    aggregate = dynamic.any(axis=0)
    return CellClassification(score, dynamic, applicable, aggregate, cfg.score_threshold, moving)


def _coherence(ep_score, fell, cells, rises, ends, open_eps, shape, cfg):
    """Promote unfinished episodes that continue a neighbouring rise/fall episode."""
    h, w = shape
    r = cfg.coherence_radius
    ep_score = ep_score.copy()
    done = np.flatnonzero(fell & (ep_score >= max(cfg.score_threshold, cfg.coherence_seed_score)))
    # index completed episodes by cell for neighbourhood lookup
    by_cell: dict[int, list[int]] = {}
    for e in done:
        by_cell.setdefault(int(cells[e]), []).append(int(e))
    open_by_cell: dict[int, int] = {int(cells[e]): int(e) for e in open_eps}
    promoted: list[int] = []
    for e in open_eps:
        c = int(cells[e])
        cj, ci = divmod(c, w)
        tr = rises[e]
        hit = False
        for dj in range(-r, r + 1):
            for di in range(-r, r + 1):
                nj, ni = cj + dj, ci + di
                if (di == 0 and dj == 0) or not (0 <= nj < h and 0 <= ni < w):
                    continue
                for n in by_cell.get(nj * w + ni, ()):
                    if rises[n] < tr < ends[n]:
                        hit = True
                        break
                if hit:
                    break
            if hit:
                break
        if hit:
            promoted.append(int(e))
    scale = cfg.coherence_score_scale
    for e in promoted:
        ep_score[e] = scale
    # grow through adjacent unfinished episodes with similar rise times
    frontier = list(promoted)
    seen = set(promoted)
    while frontier:
        e = frontier.pop()
        cj, ci = divmod(int(cells[e]), w)
        for dj in (-1, 0, 1):
            for di in (-1, 0, 1):
                nj, ni = cj + dj, ci + di
                if not (0 <= nj < h and 0 <= ni < w):
                    continue
                o = open_by_cell.get(nj * w + ni)
                if o is None or o in seen:
                    continue
                gap = int(rises[o]) - int(rises[e])
                if -cfg.coherence_back_slack <= gap <= cfg.coherence_max_gap:
                    seen.add(o)
                    ep_score[o] = scale
                    frontier.append(o)
    return ep_score


# -- rectangles and tracks ---------------------------------------------------------

_EIGHT = np.ones((3, 3), dtype=int)


def fit_rectangles(classification: CellClassification, frames_or_geometry,
                   config: AutolabelConfig | None = None) -> list[list[ObjectBox]]:
    """Minimum-area rectangles around the dynamic components of each frame.

    Components are 8-connected after bridging gaps of up to ``merge_radius``
    cells, since an object usually shows up as separate pieces of its
    visible faces; rectangles are fitted to the original cells only.
    """
    cfg = config or AutolabelConfig()
    geometry = frames_or_geometry if isinstance(frames_or_geometry, GridGeometry) else frames_or_geometry[0].geometry
    r = cfg.merge_radius
    bridge = np.ones((2 * r + 1, 2 * r + 1), bool) if r > 0 else None
    out = []
    for mask in classification.moving:
        grown = ndimage.binary_dilation(mask, bridge) if bridge is not None else mask
        labels, count = ndimage.label(grown, structure=_EIGHT)
        labels = np.where(mask, labels, 0)
        boxes = []
        if count:
            sizes = np.bincount(labels.ravel(), minlength=count + 1)
            for k in range(1, count + 1):
                if sizes[k] < cfg.min_cells:
                    continue
                jj, ii = np.nonzero(labels == k)
                boxes.append(cells_rectangle(ii, jj, geometry.cell_size, geometry.origin))
        out.append(boxes)
    return out


def _associate(per_frame: Sequence[Sequence[ObjectBox]], times, gate: float) -> list[Track]:
    """Greedy nearest-centroid association with constant-velocity prediction."""
    tracks: list[Track] = []
    active: list[Track] = []
    for k, boxes in enumerate(per_frame):
        preds = []
        for tr in active:
            c = np.array(tr.raw_boxes[-1].center)
            if len(tr.frames) >= 2:
                prev = np.array(tr.raw_boxes[-2].center)
                dt_prev = times[tr.frames[-1]] - times[tr.frames[-2]]
                c = c + (c - prev) / dt_prev * (times[k] - times[tr.frames[-1]])
            preds.append(c)
        pairs = []
        for a, p in enumerate(preds):
            for b, box in enumerate(boxes):
                d = math.hypot(box.center_east - p[0], box.center_north - p[1])
                if d <= gate:
                    pairs.append((d, a, b))
        pairs.sort()
        used_a, used_b = set(), set()
        next_active = []
        for d, a, b in pairs:
            if a in used_a or b in used_b:
                continue
            used_a.add(a)
            used_b.add(b)
            active[a].frames.append(k)
            active[a].raw_boxes.append(boxes[b])
            next_active.append(active[a])
        for b, box in enumerate(boxes):
            if b not in used_b:
                tr = Track(len(tracks), [k], [box])
                tracks.append(tr)
                next_active.append(tr)
        active = next_active
    return tracks


def _smooth(x: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(x) < 3:
        return x.copy()
    half = window // 2
    out = np.empty_like(x)
    for i in range(len(x)):
        # centred window, narrowed symmetrically at the ends so lines stay lines
        r = min(half, i, len(x) - 1 - i)
        out[i] = x[i - r:i + r + 1].mean(axis=0)
    return out


def _nearest_rank(values, q: float) -> float:
    return float(np.percentile(np.asarray(values, dtype=float), q, method="inverted_cdf"))


def assess_track(track: Track, times, config: AutolabelConfig | None = None) -> tuple[bool, str]:
    """Plausibility gates on track length and on the speed and acceleration of the smoothed trajectory."""
    cfg = config or AutolabelConfig()
    if len(track.frames) < cfg.min_track_length:
        return False, f"shorter than {cfg.min_track_length} frames"
    t = np.array([times[f] for f in track.frames], dtype=float)
    boxes = track.boxes or track.raw_boxes
    cs = _smooth(np.array([b.center for b in boxes]), cfg.smoothing_window)
    speed = np.hypot(*np.diff(cs, axis=0).T) / np.diff(t)
    if np.any(speed > cfg.max_speed):
        return False, f"speed {speed.max():.1f} m/s exceeds {cfg.max_speed}"
    if len(cs) >= 3:
        h = max(1, cfg.smoothing_window // 2)
        acc = np.hypot(*_derivative(_derivative(cs, t, h), t, h).T)
        if np.any(acc > cfg.max_accel):
            return False, f"acceleration {acc.max():.1f} m/s^2 exceeds {cfg.max_accel}"
    return True, ""


def _derivative(x: np.ndarray, t: np.ndarray, h: int) -> np.ndarray:
    """Central difference over +-h samples, shrinking the stencil at the ends."""
    n = len(x)
    out = np.empty_like(x, dtype=float)
    for k in range(n):
        lo, hi = max(0, k - h), min(n - 1, k + h)
        out[k] = (x[hi] - x[lo]) / (t[hi] - t[lo])
    return out


def refine_tracks(per_frame: Sequence[Sequence[ObjectBox]], times=None, sensor_positions=None,
                  config: AutolabelConfig | None = None, cell_size: float = 0.15) -> list[Track]:
    """Associate per-frame rectangles into tracks and refine their shape.

    Each track gets one width/length (nearest-rank ``shape_percentile`` of
    the per-frame extents) applied to all its frames. Rectangles drawn
    around whole cells overhang the object by about half a cell at each
    end, so ``extent_bias_cells`` cells are taken off each per-frame extent
    first (never going below one cell). Where the per-frame
    fit is smaller, the box grows away from the sensor, keeping the
    visible faces in place. Orientation follows the motion direction while
    the track moves faster than ``orientation_from_motion_speed``: the
    rectangle axes, averaged over nearby frames, give the direction and the
    motion picks which axis is the length.
    Implausible tracks are kept but flagged ``valid = False``.
    """
    cfg = config or AutolabelConfig()
    n = len(per_frame)
    times = np.arange(n) * 0.1 if times is None else np.asarray(times, dtype=float)
    tracks = _associate(per_frame, times, cfg.gate_distance)
    for tr in tracks:
        sensors = None
        if sensor_positions is not None:
            sensors = [sensor_positions[f] for f in tr.frames]
        _refine(tr, times, sensors, cfg, cell_size)
        tr.valid, tr.reason = assess_track(tr, times, cfg)
    return tracks


def _refine(tr: Track, times, sensors, cfg: AutolabelConfig, cell_size: float) -> None:
    t = np.array([times[f] for f in tr.frames])
    raw = tr.raw_boxes
    centers = np.array([b.center for b in raw])
    phi = np.array([b.orientation for b in raw])
    if len(raw) >= 2:
        cs = _smooth(centers, cfg.smoothing_window)
        vel = np.gradient(cs, t, axis=0)
        speed = np.hypot(vel[:, 0], vel[:, 1])
        moving = speed > cfg.orientation_from_motion_speed
        if moving.any():
            motion_phi = np.arctan2(vel[:, 1], vel[:, 0])
            # circular mean of doubled angles handles the pi ambiguity
            mean_phi = 0.5 * math.atan2(np.sin(2 * motion_phi[moving]).mean(), np.cos(2 * motion_phi[moving]).mean())
            heading = np.where(moving, motion_phi, mean_phi)
            axes = _local_axes(raw, cfg.orientation_window)
            phi = np.array([_pick_axis(a, h) for a, h in zip(axes, heading)])
        else:
            mean_phi = 0.5 * math.atan2(np.sin(2 * phi).mean(), np.cos(2 * phi).mean())
            phi = np.full(len(raw), mean_phi)
    phi = canonical_angle(phi)
    # per-frame extents in each frame's (u along phi, v across) axes
    spans = []
    for b, a in zip(raw, phi):
        corners = b.corners()
        c, s = math.cos(a), math.sin(a)
        u = corners[:, 0] * c + corners[:, 1] * s
        v = -corners[:, 0] * s + corners[:, 1] * c
        spans.append((u.min(), u.max(), v.min(), v.max()))
    spans = np.array(spans)
    bias = cfg.extent_bias_cells * cell_size
    length = max(cell_size, _nearest_rank(spans[:, 1] - spans[:, 0], cfg.shape_percentile) - bias)
    width = max(cell_size, _nearest_rank(spans[:, 3] - spans[:, 2], cfg.shape_percentile) - bias)
    # candidate centres per frame: keep either face when the view is partial
    cands = []
    for k, (a, (u0, u1, v0, v1)) in enumerate(zip(phi, spans)):
        c, s = math.cos(a), math.sin(a)
        opts = []
        for uc in _face_options(u0, u1, length):
            for vc in _face_options(v0, v1, width):
                opts.append((uc * c - vc * s, uc * s + vc * c))
        cands.append(np.array(opts))
    centers = _resolve_placement(cands, spans, length, width, phi, t, sensors)
    boxes = [ObjectBox(float(e), float(nn), width, length, a).canonical() for (e, nn), a in zip(centers, phi)]
    tr.boxes = boxes
    tr.width, tr.length = boxes[0].width, boxes[0].length


def _face_options(lo: float, hi: float, size: float, full: float = 0.9) -> list[float]:
    if hi - lo >= full * size:
        return [(lo + hi) / 2]
    return [lo + size / 2, hi - size / 2]


def _resolve_placement(cands, spans, length, width, phi, t, sensors) -> np.ndarray:
    """Pick one candidate centre per frame.

    The most completely observed frame is placed with the sensor rule (the
    hidden part lies away from the sensor); from there the choice propagates
    forwards and backwards in time, taking the candidate closest to a
    constant-velocity prediction from the frames already placed.
    """
    n = len(cands)
    seen = ((spans[:, 1] - spans[:, 0]) / length) * ((spans[:, 3] - spans[:, 2]) / width)
    start = int(np.argmax(seen))
    out = np.zeros((n, 2))
    out[start] = _sensor_choice(cands[start], spans[start], length, width, phi[start],
                                None if sensors is None else sensors[start])
    for order in (range(start + 1, n), range(start - 1, -1, -1)):
        placed = [start]
        for k in order:
            prev = placed[-1]
            if len(placed) >= 2:
                q = placed[max(0, len(placed) - 4)]
                vel = (out[prev] - out[q]) / (t[prev] - t[q])
            else:
                vel = np.zeros(2)
            pred = out[prev] + vel * (t[k] - t[prev])
            d = np.hypot(*(cands[k] - pred).T)
            out[k] = cands[k][int(np.argmin(d))]
            placed.append(k)
    return out


def _sensor_choice(opts, span, length, width, a, sensor):
    if len(opts) == 1 or sensor is None:
        return opts.mean(axis=0)
    c, s = math.cos(a), math.sin(a)
    su = sensor[0] * c + sensor[1] * s
    sv = -sensor[0] * s + sensor[1] * c
    uc = _place(span[0], span[1], length, su)
    vc = _place(span[2], span[3], width, sv)
    return np.array([uc * c - vc * s, uc * s + vc * c])


def _local_axes(raw: Sequence[ObjectBox], window: int) -> np.ndarray:
    """Area-weighted median rectangle axis (modulo pi/2) over neighbouring frames."""
    theta = np.array([b.orientation for b in raw])
    w = np.array([b.area for b in raw])
    out = np.empty(len(raw))
    quarter = math.pi / 2
    for k in range(len(raw)):
        lo, hi = max(0, k - window), min(len(raw), k + window + 1)
        th, wt = theta[lo:hi], w[lo:hi]
        centre = 0.25 * math.atan2((wt * np.sin(4 * th)).sum(), (wt * np.cos(4 * th)).sum())
        dev = (th - centre + quarter / 2) % quarter - quarter / 2
        order = np.argsort(dev)
        cum = np.cumsum(wt[order])
        out[k] = centre + dev[order][int(np.searchsorted(cum, cum[-1] / 2))]
    return out


def _pick_axis(axis: float, heading: float) -> float:
    """Of the two rectangle axes, the one closer to the heading (modulo pi)."""
    cands = np.array([axis, axis + math.pi / 2])
    return float(cands[int(np.argmin(np.abs(canonical_angle(cands - heading))))])


def _place(lo: float, hi: float, size: float, sensor) -> float:
    """Centre of an interval of ``size`` that keeps the face nearest the sensor fixed."""
    if hi - lo >= size or sensor is None:
        return (lo + hi) / 2
    if sensor <= (lo + hi) / 2:
        return lo + size / 2
    return hi - size / 2


# -- labels -----------------------------------------------------------------------

@dataclass
class FrameLabel:
    frame: int
    timestamp: float
    static_map: np.ndarray
    boxes: list[ObjectBox]
    track_ids: list[int]


def make_labels(tracks: Sequence[Track], classification: CellClassification,
                frames: Sequence[DogmaFrame]) -> list[FrameLabel]:
    """Static-occupancy target (P_O with dynamic cells removed) and box list per frame."""
    geometry = frames[0].geometry
    ce, cn = geometry.center_grids()
    margin = geometry.cell_size / 2
    labels = []
    for k, f in enumerate(frames):
        y = f.occupancy_probability().astype(np.float64)
        y[classification.moving[k]] = 0.0
        boxes, ids = [], []
        for tr in tracks:
            if not tr.valid:
                continue
            b = tr.box_at(k)
            if b is None:
                continue
            boxes.append(b)
            ids.append(tr.track_id)
            y[b.contains(ce, cn, margin)] = 0.0
        labels.append(FrameLabel(k, f.timestamp, y.astype(np.float32), boxes, ids))
    return labels


@dataclass
class AutolabelResult:
    frames: list[DogmaFrame]
    classification: CellClassification
    rectangles: list[list[ObjectBox]]
    tracks: list[Track]
    labels: list[FrameLabel]


def autolabel(frames: Sequence[DogmaFrame], config: AutolabelConfig | None = None) -> AutolabelResult:
    cfg = config or AutolabelConfig()
    aligned = ego_align(frames)
    cls = classify_cells(aligned, cfg)
    rects = fit_rectangles(cls, aligned, cfg)
    times = [f.timestamp for f in aligned]
    ref = aligned[0].ego_pose
    # sensor positions expressed in the frame-0 grid placement
    sensors = [(f.ego_pose[0], f.ego_pose[1]) if f.ego_pose else (ref[0], ref[1]) for f in frames]
    tracks = refine_tracks(rects, times, sensors, cfg, aligned[0].geometry.cell_size)
    labels = make_labels(tracks, cls, aligned)
    return AutolabelResult(aligned, cls, rects, tracks, labels)


# -- label files ------------------------------------------------------------------

BOX_FIELDS = ("frame", "track_id", "east", "north", "width", "length", "orientation")


def write_labels(labels: Sequence[FrameLabel], geometry: GridGeometry, static_path, boxes_path,
                 ego_poses=None) -> None:
    records = [GridRecord(lab.timestamp, tuple(ego_poses[k]) if ego_poses is not None else (0.0, 0.0, 0.0),
                          lab.static_map[..., None]) for k, lab in enumerate(labels)]
    write_grid_file(static_path, geometry, records, 1)
    write_boxes_csv(boxes_path, [(lab.frame, tid, b) for lab in labels for tid, b in zip(lab.track_ids, lab.boxes)])


def write_boxes_csv(path, rows) -> None:
    """Rows of (frame, track_id, ObjectBox) to CSV; floats use repr for exact round trips."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(BOX_FIELDS + ("score",))
        for frame, tid, b in rows:
            wr.writerow([frame, tid, repr(b.center_east), repr(b.center_north), repr(b.width),
                         repr(b.length), repr(b.orientation), "" if b.score is None else repr(b.score)])


def read_boxes_csv(path) -> list[tuple[int, int, ObjectBox]]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            score = r.get("score") or None
            rows.append((int(r["frame"]), int(r["track_id"]), ObjectBox(
                float(r["east"]), float(r["north"]), float(r["width"]), float(r["length"]),
                float(r["orientation"]), None if score is None else float(score))))
    return rows


def read_labels(static_path, boxes_path):
    gf = read_grid_file(static_path)
    if gf.channel_count != 1:
        raise ValueError(f"{static_path}: expected a single-channel label grid")
    boxes: dict[int, list[tuple[int, ObjectBox]]] = {}
    for frame, tid, b in read_boxes_csv(boxes_path):
        boxes.setdefault(frame, []).append((tid, b))
    labels = []
    for k, rec in enumerate(gf.records):
        entries = boxes.get(k, [])
        labels.append(FrameLabel(k, rec.timestamp, rec.data[..., 0], [b for _, b in entries], [t for t, _ in entries]))
    return gf.geometry, labels


__all__ = [
    "AutolabelConfig", "CellClassification", "Track", "FrameLabel", "AutolabelResult",
    "ego_align", "classify_cells", "fit_rectangles", "refine_tracks", "assess_track",
    "make_labels", "autolabel", "write_labels", "read_labels", "write_boxes_csv", "read_boxes_csv",
]

