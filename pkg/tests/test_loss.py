import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dogmakit.anchors import AnchorSet, LabelTensors
from dogmakit.loss import (
    DYNAMIC_HEADS, HEADS, LossConfig, MissingHeadError, cell_weights, dynamic_loss_term, finite_difference,
    gradient_check, loss_gradient, static_loss, total_loss,
)


def _random_heads(rng, h=4, w=5, sizes=3, orients=4):
    return {"static_map": rng.normal(size=(h, w)), "iou": rng.normal(size=(h, w, sizes * orients)),
            "d_width": rng.normal(size=(h, w, sizes)), "d_length": rng.normal(size=(h, w, sizes)),
            "d_orient": rng.normal(size=(h, w, orients))}


def _naive_loss(preds, labels, a_map, cfg):
    """Element-by-element evaluation straight from the loss definition."""
    ps, ys = preds["static_map"], labels["static_map"]
    total = 0.0
    for j in range(ps.shape[0]):
        for i in range(ps.shape[1]):
            total += cfg.lambda_static / 2 * (ps[j, i] - ys[j, i]) ** 2
    for name in DYNAMIC_HEADS:
        lam, f = cfg.head(name)
        p, y = preds[name], labels[name]
        for j in range(p.shape[0]):
            for i in range(p.shape[1]):
                a = a_map[j, i]
                weight = 1 + cfg.foreground_gain * (1.0 if f == 0 else a ** f)
                for k in range(p.shape[2]):
                    total += lam / 2 * weight * (p[j, i, k] - y[j, i, k]) ** 2
    return total


def test_static_examples():
    assert static_loss(np.ones((1, 1)), np.zeros((1, 1)), 0.5) == pytest.approx(0.25, abs=1e-12)
    assert static_loss(np.ones((3, 3)), np.ones((3, 3))) == 0.0
    x, y = np.full((2, 2), 0.3), np.zeros((2, 2))
    assert static_loss(x, y, 1.0) == pytest.approx(2 * static_loss(x, y, 0.5), abs=1e-15)
    with pytest.raises(ValueError):
        static_loss(np.zeros((2, 2)), np.zeros((2, 3)))


@pytest.mark.parametrize("a, f, expected", [(0.0, 4.0, 0.5), (1.0, 4.0, 200.5), (0.5, 4.0, 13.0)])
def test_single_cell_examples(a, f, expected):
    got = dynamic_loss_term(np.ones((1, 1, 1)), np.zeros((1, 1, 1)), np.array([[a]]), 1.0, 400.0, f)
    assert abs(got - expected) <= 1e-12


def test_foreground_cell_weighs_401_times_background():
    w = cell_weights(np.array([[0.0, 1.0]]), 400.0, 4.0)
    assert w[0, 0] == 1.0 and w[0, 1] == 401.0
    pred = np.ones((1, 2, 1))
    per_cell = [dynamic_loss_term(pred[:, [k]], np.zeros((1, 1, 1)), np.array([[a]]), 1.0, 400.0, 4.0)
                for k, a in enumerate((0.0, 1.0))]
    assert per_cell[1] / per_cell[0] == 401.0


def test_zero_power_zero_is_one():
    assert cell_weights(np.array([0.0, 0.5]), 400.0, 0.0).tolist() == [401.0, 401.0]


def test_no_foreground_gain_is_plain_euclidean(rng):
    p, y = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 4, 5))
    a = rng.uniform(0, 1, (3, 4))
    got = dynamic_loss_term(p, y, a, 0.7, 0.0, 4.0)
    assert got == pytest.approx(0.7 / 2 * np.sum((p - y) ** 2), rel=1e-12)


def test_matches_naive_reference(rng):
    cfg = LossConfig()
    for _ in range(5):
        preds, labels = _random_heads(rng), _random_heads(rng)
        a = rng.uniform(0, 1, (4, 5))
        a[0] = 0.0
        got, terms = total_loss(preds, labels, a, cfg)
        want = _naive_loss(preds, labels, a, cfg)
        assert abs(got - want) <= 1e-9 * abs(want)
        assert abs(got - sum(terms.values())) <= 1e-12 * abs(got)
        assert set(terms) == set(HEADS)


def test_perfect_prediction(rng):
    labels = _random_heads(rng)
    loss, terms = total_loss(labels, labels, rng.uniform(0, 1, (4, 5)))
    assert loss == 0 and not any(terms.values())
    grads = loss_gradient(labels, labels, rng.uniform(0, 1, (4, 5)))
    assert all(not g.any() for g in grads.values())


def test_accepts_label_tensors(rng):
    a = AnchorSet.uniform([(1, 2), (2, 3), (1, 1)], 4)
    y = LabelTensors(**_random_heads(rng))
    y.check(a)
    p = LabelTensors(**_random_heads(rng))
    amap = rng.uniform(0, 1, (4, 5))
    assert total_loss(p, y, amap)[0] == pytest.approx(total_loss(vars(p), vars(y), amap)[0], rel=1e-15)


def test_missing_head(rng):
    heads = _random_heads(rng)
    del heads["d_orient"]
    with pytest.raises(MissingHeadError):
        total_loss(heads, _random_heads(rng), np.zeros((4, 5)))


def test_negative_config_rejected():
    with pytest.raises(ValueError):
        LossConfig(foreground_gain=-1.0)


def test_background_gradient_ignores_foreground_gain(rng):
    preds, labels = _random_heads(rng), _random_heads(rng)
    a = rng.uniform(0.1, 1, (4, 5))
    a[1, 2] = 0.0
    g1 = loss_gradient(preds, labels, a, LossConfig(foreground_gain=400))
    g2 = loss_gradient(preds, labels, a, LossConfig(foreground_gain=3))
    for name in DYNAMIC_HEADS:
        assert np.array_equal(g1[name][1, 2], g2[name][1, 2])
        assert not np.array_equal(g1[name][0, 0], g2[name][0, 0])


def test_finite_difference_helper():
    x = np.array([1.0, 2.0, 3.0])
    fd = finite_difference(lambda v: float(np.sum(v ** 3)), x, [0, 2], h=1e-4)
    assert fd == pytest.approx([3.0, 27.0], rel=1e-7)


@settings(max_examples=30)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4), st.integers(1, 4),
       st.floats(0, 500), st.floats(0, 5), st.integers(0, 2 ** 32 - 1))
def test_gradient_matches_finite_differences(h, w, sizes, orients, gain, focus, seed):
    rng = np.random.default_rng(seed)
    cfg = LossConfig(foreground_gain=gain, focus_iou=focus, focus_dw=focus / 2)
    preds, labels = _random_heads(rng, h, w, sizes, orients), _random_heads(rng, h, w, sizes, orients)
    a = rng.uniform(0, 1, (h, w))
    report = gradient_check(preds, labels, a, cfg, samples=10, h=1e-4, rng=rng)
    assert max(report.values()) < 1e-4


@settings(max_examples=30)
@given(st.integers(0, 2 ** 32 - 1), st.floats(1.01, 3.0))
def test_loss_monotone_in_residual(seed, scale):
    rng = np.random.default_rng(seed)
    preds, labels = _random_heads(rng), _random_heads(rng)
    a = rng.uniform(0, 1, (4, 5))
    base, _ = total_loss(preds, labels, a)
    assert base >= 0
    for name in HEADS:
        bigger = dict(preds)
        arr = preds[name].copy()
        idx = tuple(rng.integers(s) for s in arr.shape)
        arr[idx] = labels[name][idx] + scale * (arr[idx] - labels[name][idx])
        bigger[name] = arr
        assert total_loss(bigger, labels, a)[0] >= base
