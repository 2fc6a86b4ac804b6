"""Training objective for the static and detection heads, with analytic gradients.

The total loss is the static head's Euclidean loss plus one spatially
balanced squared-error term per detection head::

    L_s = lambda_s / 2 * sum_c (yhat_s(c) - y_s(c))^2
    L_d = lambda / 2 * sum_c sum_alpha (1 + lambda_I * A(c)^f) * (yhat(c, alpha) - y(c, alpha))^2

All terms are plain sums; normalisation is left to the caller. ``0^0`` is
taken as 1, so ``f = 0`` gives every cell the weight ``1 + lambda_I``.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, Mapping

import numpy as np

HEADS = ("static_map", "iou", "d_width", "d_length", "d_orient")
DYNAMIC_HEADS = HEADS[1:]


class MissingHeadError(KeyError):
    pass


@dataclass
class LossConfig:
    """Head weights, foreground gain and focus exponents.

    Attributes:
        lambda_static: Weight of the static head.
        lambda_iou, lambda_dw, lambda_dl, lambda_dphi: Detection head weights.
        foreground_gain: lambda_I, extra weight of object cells.
        focus_iou, focus_dw, focus_dl, focus_dphi: Exponent f on A(c) per head.
    """

    lambda_static: float = 0.5
    lambda_iou: float = 1.0
    lambda_dw: float = 0.01
    lambda_dl: float = 0.05
    lambda_dphi: float = 0.25
    foreground_gain: float = 400.0
    focus_iou: float = 4.0
    focus_dw: float = 1.0
    focus_dl: float = 1.0
    focus_dphi: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")

    def head(self, name: str) -> tuple[float, float]:
        """(lambda, focus) of a detection head."""
        key = {"iou": "iou", "d_width": "dw", "d_length": "dl", "d_orient": "dphi"}[name]
        return getattr(self, f"lambda_{key}"), getattr(self, f"focus_{key}")


def _check_shapes(pred, label, what: str) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape:
        raise ValueError(f"{what}: prediction shape {pred.shape} != label shape {label.shape}")
    return pred, label


def cell_weights(a_map, foreground_gain: float, focus: float) -> np.ndarray:
    """Per-cell weight 1 + lambda_I * A(c)^f, with 0^0 = 1."""
    a = np.asarray(a_map, dtype=np.float64)
    powered = np.ones_like(a) if focus == 0 else np.power(a, focus)
    return 1.0 + foreground_gain * powered


def static_loss(pred, label, lambda_static: float = 0.5) -> float:
    pred, label = _check_shapes(pred, label, "static head")
    return float(lambda_static / 2 * np.sum((pred - label) ** 2))


def dynamic_loss_term(pred, label, a_map, lam: float, foreground_gain: float, focus: float) -> float:
    """Spatially balanced squared error of one detection head.

    Args:
        pred, label: (H, W, K) tensors.
        a_map: (H, W) spatial weight map A(c).
        lam: Head weight.
        foreground_gain: lambda_I.
        focus: Exponent f.
    """
    pred, label = _check_shapes(pred, label, "detection head")
    a = np.asarray(a_map, dtype=np.float64)
    if pred.shape[:2] != a.shape:
        raise ValueError(f"weight map shape {a.shape} does not match head shape {pred.shape}")
    w = cell_weights(a, foreground_gain, focus)
    per_cell = np.sum((pred - label) ** 2, axis=-1)
    return float(lam / 2 * np.sum(w * per_cell))


def _heads(tensors) -> dict[str, np.ndarray]:
    out = {}
    for name in HEADS:
        if isinstance(tensors, Mapping):
            if name not in tensors:
                raise MissingHeadError(f"missing head {name!r}")
            out[name] = tensors[name]
        else:
            if not hasattr(tensors, name):
                raise MissingHeadError(f"missing head {name!r}")
            out[name] = getattr(tensors, name)
    return out


def total_loss(preds, labels, a_map, config: LossConfig | None = None) -> tuple[float, dict[str, float]]:
    """Sum of the static loss and the four detection head terms.

    ``preds`` and ``labels`` are :class:`~dogmakit.anchors.LabelTensors` or
    mappings with the keys in :data:`HEADS`.

    Returns:
        The scalar loss and a dict with one entry per head.
    """
    cfg = config or LossConfig()
    p, y = _heads(preds), _heads(labels)
    terms = {"static_map": static_loss(p["static_map"], y["static_map"], cfg.lambda_static)}
    for name in DYNAMIC_HEADS:
        lam, focus = cfg.head(name)
        terms[name] = dynamic_loss_term(p[name], y[name], a_map, lam, cfg.foreground_gain, focus)
    return float(sum(terms.values())), terms


def loss_gradient(preds, labels, a_map, config: LossConfig | None = None) -> dict[str, np.ndarray]:
    """dL/dyhat for every head: lambda * weight * (yhat - y)."""
    cfg = config or LossConfig()
    p, y = _heads(preds), _heads(labels)
    ps, ys = _check_shapes(p["static_map"], y["static_map"], "static head")
    grads = {"static_map": cfg.lambda_static * (ps - ys)}
    for name in DYNAMIC_HEADS:
        lam, focus = cfg.head(name)
        ph, yh = _check_shapes(p[name], y[name], name)
        w = cell_weights(a_map, cfg.foreground_gain, focus)
        grads[name] = lam * w[..., None] * (ph - yh)
    return grads


def finite_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, indices, h: float = 1e-4) -> np.ndarray:
    """Central differences of a scalar function at selected flat indices of ``x``."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.empty(len(indices))
    for k, i in enumerate(indices):
        old = flat[i]
        flat[i] = old + h
        up = fn(x)
        flat[i] = old - h
        down = fn(x)
        flat[i] = old
        out[k] = (up - down) / (2 * h)
    return out


def gradient_check(preds, labels, a_map, config: LossConfig | None = None, samples: int = 20,
                   h: float = 1e-4, rng: np.random.Generator | None = None) -> dict[str, float]:
    """Worst relative error between analytic and finite-difference gradients per head.

    Checks ``samples`` random elements per head. Relative error is
    ``|g - fd| / max(|g|, |fd|, 1e-12)``.
    """
    cfg = config or LossConfig()
    rng = rng or np.random.default_rng(0)
    p, y = _heads(preds), _heads(labels)
    p = {k: np.asarray(v, dtype=np.float64) for k, v in p.items()}
    grads = loss_gradient(p, y, a_map, cfg)
    report = {}
    for name in HEADS:
        base = p[name]
        idx = rng.choice(base.size, size=min(samples, base.size), replace=False)

        # the other heads do not depend on this one, so difference only its own term
        if name == "static_map":
            def fn(x):
                return static_loss(x, y["static_map"], cfg.lambda_static)
        else:
            lam, focus = cfg.head(name)

            def fn(x, name=name, lam=lam, focus=focus):
                return dynamic_loss_term(x, y[name], a_map, lam, cfg.foreground_gain, focus)

        fd = finite_difference(fn, base, idx, h)
        g = grads[name].reshape(-1)[idx]
        rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-12)
        report[name] = float(rel.max()) if len(rel) else 0.0
    return report
