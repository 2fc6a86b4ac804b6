"""Evaluation: ROC/AUC for cell segmentation, IoU-sweep precision/recall and box RMSE."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxes import ObjectBox, angle_diff_mod_pi, pairwise_iou
from .sim import DYNAMIC, STATIC

DEFAULT_IOU_SWEEP = tuple(round(k / 100, 2) for k in range(1, 101))


class MetricInputError(ValueError):
    pass


@dataclass(frozen=True)
class CurvePoint:
    threshold: float
    x: float
    y: float


@dataclass
class MatchResult:
    """Index pairs (detection, ground truth, IoU) plus the unmatched indices."""

    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_detections: list[int] = field(default_factory=list)
    unmatched_ground_truths: list[int] = field(default_factory=list)


# -- ROC -------------------------------------------------------------------------

def roc(scores, labels) -> tuple[list[CurvePoint], float]:
    """ROC curve over every distinct score and its area.

    Cells with score >= threshold are predicted positive. The curve starts at
    (0, 0) with threshold +inf. The area is accumulated with the trapezoidal
    rule in integer counts, so it equals the pairwise rank statistic
    (ties counting one half) exactly.

    Raises:
        MetricInputError: Only one class present, or shapes differ.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise MetricInputError("scores and labels differ in size")
    if np.isnan(s).any():
        raise MetricInputError("scores contain NaN")
    n_pos = int(y.sum())
    n_neg = int(len(y) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricInputError("ROC needs at least one positive and one negative label")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends].astype(np.int64)
    fp = (ends + 1 - tp).astype(np.int64)
    tp0 = np.r_[0, tp[:-1]]
    fp0 = np.r_[0, fp[:-1]]
    twice_area = int(np.sum((fp - fp0) * (tp + tp0)))
    auc = twice_area / (2 * n_pos * n_neg)
    curve = [CurvePoint(math.inf, 0.0, 0.0)]
    curve += [CurvePoint(float(s[e]), float(f / n_neg), float(t / n_pos)) for e, t, f in zip(ends, tp, fp)]
    return curve, auc


def balanced_accuracy(predicted, labels) -> float:
    p = np.asarray(predicted).astype(bool).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if not y.any() or y.all():
        raise MetricInputError("balanced accuracy needs both classes")
    tpr = np.mean(p[y])
    tnr = np.mean(~p[~y])
    return float((tpr + tnr) / 2)


def evaluate_segmentation(score, predicted, truth_codes, p_o, p_min: float = 0.7) -> dict:
    """Dynamic-vs-static segmentation quality on observed occupied cells.

    Only cells with P_O >= ``p_min`` whose ground truth is static or dynamic
    are scored; free, unknown and unobservable cells carry no label. Missing
    scores (NaN) count as 0.

    Args:
        score: Soft dynamic score, any shape.
        predicted: Binary dynamic labels, same shape.
        truth_codes: Ground-truth cell codes (static and dynamic as in :mod:`dogmakit.sim`).
        p_o: Occupancy probability, same shape.
        p_min: Occupancy needed for a cell to count as observed occupied.

    Returns:
        Dict with ``auc``, ``balanced_accuracy``, ``cells``, ``positives`` and the ROC ``curve``.
    """
    truth = np.asarray(truth_codes)
    keep = (np.asarray(p_o) >= p_min) & ((truth == STATIC) | (truth == DYNAMIC))
    pos = truth[keep] == DYNAMIC
    sc = np.nan_to_num(np.asarray(score, dtype=np.float64)[keep], nan=0.0)
    curve, auc = roc(sc, pos)
    return {"auc": auc, "balanced_accuracy": balanced_accuracy(np.asarray(predicted)[keep], pos),
            "cells": int(keep.sum()), "positives": int(pos.sum()), "curve": curve}


# -- matching --------------------------------------------------------------------

def _score_order(boxes: Sequence[ObjectBox]) -> np.ndarray:
    scores = np.array([1.0 if b.score is None else b.score for b in boxes])
    return np.argsort(-scores, kind="stable")


def _greedy(iou: np.ndarray, order: np.ndarray, iou_min: float) -> MatchResult:
    n_det, n_gt = iou.shape
    taken = np.zeros(n_gt, bool)
    res = MatchResult()
    for d in order:
        cand = np.where(taken | (iou[d] < iou_min), -1.0, iou[d])
        g = int(np.argmax(cand)) if n_gt else -1
        if n_gt and cand[g] >= 0:
            taken[g] = True
            res.pairs.append((int(d), g, float(iou[d, g])))
        else:
            res.unmatched_detections.append(int(d))
    res.unmatched_detections.sort()
    res.unmatched_ground_truths = [int(g) for g in np.flatnonzero(~taken)]
    return res


def match(detections: Sequence[ObjectBox], ground_truths: Sequence[ObjectBox], iou_min: float = 0.5) -> MatchResult:
    """Greedy one-to-one matching in descending detection score.

    Each detection takes the unmatched ground truth with the highest IoU,
    provided it reaches ``iou_min``. Detections without a score rank as 1;
    equal scores keep input order.
    """
    iou = pairwise_iou(list(detections), list(ground_truths))
    return _greedy(iou, _score_order(detections), iou_min)


def precision_recall(detections_per_frame, ground_truth_per_frame,
                     iou_thresholds: Sequence[float] = DEFAULT_IOU_SWEEP) -> tuple[list[CurvePoint], float]:
    """Precision and recall over all frames at each IoU threshold of a sweep.

    Returns one :class:`CurvePoint` per threshold with ``x`` = recall and
    ``y`` = precision, and AP as the mean precision over the sweep. When
    there are no detections at all, precision counts as 0.

    Raises:
        MetricInputError: Frame counts differ or there is no ground truth.
    """
    dets = [list(d) for d in detections_per_frame]
    gts = [list(g) for g in ground_truth_per_frame]
    if len(dets) != len(gts):
        raise MetricInputError("detections and ground truth cover different numbers of frames")
    n_gt = sum(len(g) for g in gts)
    if n_gt == 0:
        raise MetricInputError("no ground truth boxes in any frame")
    n_det = sum(len(d) for d in dets)
    frames = [(pairwise_iou(d, g), _score_order(d)) for d, g in zip(dets, gts)]
    curve = []
    for thr in iou_thresholds:
        tp = sum(len(_greedy(iou, order, thr).pairs) for iou, order in frames)
        precision = tp / n_det if n_det else 0.0
        curve.append(CurvePoint(float(thr), float(tp / n_gt), float(precision)))
    ap = float(np.mean([p.y for p in curve])) if curve else 0.0
    return curve, ap


# -- box errors ------------------------------------------------------------------

@dataclass(frozen=True)
class BoxErrors:
    width: float
    length: float
    position: float
    orientation_deg: float
    count: int


def box_rmse(pairs: Sequence[tuple[ObjectBox, ObjectBox]]) -> BoxErrors:
    """RMSE of width, length, centre distance and orientation (degrees, modulo pi).

    Args:
        pairs: Matched (detection, ground truth) boxes.

    Raises:
        MetricInputError: No pairs.
    """
    if not pairs:
        raise MetricInputError("box RMSE needs at least one matched pair")
    d = np.array([a.canonical().as_array() for a, _ in pairs])
    g = np.array([b.canonical().as_array() for _, b in pairs])

    def rms(x):
        return float(np.sqrt(np.mean(np.square(x))))

    return BoxErrors(
        width=rms(d[:, 2] - g[:, 2]),
        length=rms(d[:, 3] - g[:, 3]),
        position=rms(np.hypot(d[:, 0] - g[:, 0], d[:, 1] - g[:, 1])),
        orientation_deg=math.degrees(rms(angle_diff_mod_pi(d[:, 4], g[:, 4]))),
        count=len(pairs),
    )


def matched_pairs(detections_per_frame, ground_truth_per_frame, iou_min: float = 0.5):
    """Matched (detection, ground truth) box pairs over a sequence."""
    out = []
    for dets, gts in zip(detections_per_frame, ground_truth_per_frame):
        m = match(dets, gts, iou_min)
        out.extend((dets[i], gts[j]) for i, j, _ in m.pairs)
    return out


# -- output files ----------------------------------------------------------------

def write_curve_csv(path, curve: Sequence[CurvePoint], x_name: str = "x", y_name: str = "y") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", x_name, y_name])
        for p in curve:
            w.writerow([repr(float(p.threshold)), repr(float(p.x)), repr(float(p.y))])


def read_curve_csv(path) -> list[CurvePoint]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [CurvePoint(float(a), float(b), float(c)) for a, b, c in rows]


def summary(auc: float | None = None, ap: float | None = None, errors: BoxErrors | None = None) -> dict:
    out: dict = {"auc": auc, "ap": ap}
    if errors is not None:
        out.update(rmse_width=errors.width, rmse_length=errors.length, rmse_position=errors.position,
                   rmse_orientation_deg=errors.orientation_deg, matched_pairs=errors.count)
    else:
        out.update(rmse_width=None, rmse_length=None, rmse_position=None, rmse_orientation_deg=None,
                   matched_pairs=0)
    return out


def write_summary(path, data: dict) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
