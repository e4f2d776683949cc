import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import numeric_grad, rel_error
from pacrnn.errors import DimensionError, LabelError, ParameterError, StateError
from pacrnn.layers import (AffineLayer, LstmCell, SoftmaxHead, affine_forward, backward,
                           lstm_step, softmax_ce)
from pacrnn.tensor import Rng

GRAD_POINTS = 20
GRAD_TOL = 1e-6


# -- affine ------------------------------------------------------------------

def test_affine_linear_identity():
    layer = AffineLayer(np.eye(3), np.zeros(3), "linear")
    x = np.array([0.5, -2.0, 3.0])
    assert affine_forward(layer, x).tolist() == x.tolist()


def test_affine_sigmoid_zero_weights():
    layer = AffineLayer(np.zeros((4, 3)), np.zeros(4), "sigmoid")
    assert affine_forward(layer, np.ones(3)).tolist() == [0.5] * 4


@pytest.mark.parametrize("activation", ["sigmoid", "tanh", "linear"])
def test_affine_matches_scalar_loop(activation):
    rng = Rng(1)
    layer = AffineLayer.init(rng, 6, 4, activation)
    layer.bias[:] = rng.normal(size=4)
    x = rng.normal(size=6)
    ref = []
    for i in range(4):
        a = layer.bias[i]
        for j in range(6):
            a += layer.weights[i, j] * x[j]
        ref.append({"sigmoid": 1 / (1 + math.exp(-a)), "tanh": math.tanh(a),
                    "linear": a}[activation])
    assert np.max(np.abs(affine_forward(layer, x) - np.array(ref))) < 1e-12


def test_affine_shape_errors():
    layer = AffineLayer.init(Rng(0), 3, 2)
    with pytest.raises(DimensionError):
        layer.forward(np.zeros(4))
    with pytest.raises(DimensionError):
        AffineLayer(np.zeros((2, 3)), np.zeros(3))
    with pytest.raises(ParameterError):
        AffineLayer(np.zeros((2, 3)), np.zeros(2), "relu")


@pytest.mark.parametrize("activation", ["sigmoid", "tanh", "linear"])
def test_affine_gradient_check(activation):
    worst = 0.0
    for point in range(GRAD_POINTS):
        rng = Rng(100 + point)
        layer = AffineLayer.init(rng.child("init"), 5, 4, activation, gain=2.0)
        layer.bias[:] = rng.normal(size=4)
        x = rng.normal(size=(3, 5))
        r = rng.normal(size=(3, 4))

        def f():
            return float((r * layer.forward(x)).sum())

        _, cache = layer.forward_cached(x)
        grads, dx = layer.backward(cache, r)
        for name, p in layer.params().items():
            worst = max(worst, rel_error(grads[name], numeric_grad(f, p)))
        x_var = x.copy()
        num_dx = numeric_grad(lambda: float((r * layer.forward(x_var)).sum()), x_var)
        worst = max(worst, rel_error(dx, num_dx))
    assert worst < GRAD_TOL


def test_affine_zero_upstream_gives_zero_grads():
    layer = AffineLayer.init(Rng(2), 3, 2)
    _, cache = layer.forward_cached(np.ones((2, 3)))
    grads, dx = layer.backward(cache, np.zeros((2, 2)))
    assert all(not g.any() for g in grads.values()) and not dx.any()


def test_linear_input_gradient_is_transpose_product():
    layer = AffineLayer.init(Rng(3), 4, 3, "linear")
    up = np.array([0.5, -1.0, 2.0])
    _, cache = layer.forward_cached(np.ones(4))
    _, dx = backward(layer, cache, up)
    assert np.array_equal(dx, layer.weights.T @ up)


def test_backward_without_cache_is_state_error():
    with pytest.raises(StateError):
        AffineLayer.init(Rng(0), 2, 2).backward(None, np.zeros(2))
    with pytest.raises(StateError):
        LstmCell.init(Rng(0), 2, 2).backward(None, np.zeros(2))
    with pytest.raises(StateError):
        SoftmaxHead.init(Rng(0), 2, 2).backward(None)


# -- lstm --------------------------------------------------------------------

def test_lstm_zero_everything_gives_zero_h():
    cell = LstmCell(np.zeros((8, 3)), np.zeros((8, 2)), np.zeros(8))
    h, c = lstm_step(cell, np.ones(3), np.zeros(2), np.zeros(2))
    assert h.tolist() == [0.0, 0.0] and c.tolist() == [0.0, 0.0]


def test_lstm_saturated_gates_retain_memory():
    H = 3
    bias = np.zeros(4 * H)
    bias[:H] = -50.0          # input gate shut
    bias[H:2 * H] = 50.0      # forget gate open
    rng = Rng(4)
    cell = LstmCell(rng.normal(size=(4 * H, 2)) * 0.1, rng.normal(size=(4 * H, H)) * 0.1, bias)
    c_prev = np.array([0.7, -0.3, 1.5])
    _, c = lstm_step(cell, rng.normal(size=2), rng.normal(size=H), c_prev)
    assert np.max(np.abs(c - c_prev)) < 1e-12


def _scalar_lstm(cell, xs):
    H = cell.cells
    h = [0.0] * H
    c = [0.0] * H
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    for x in xs:
        a = []
        for r in range(4 * H):
            s = cell.bias[r]
            for j in range(len(x)):
                s += cell.input_weights[r, j] * x[j]
            for j in range(H):
                s += cell.recurrent_weights[r, j] * h[j]
            a.append(s)
        i = [sig(a[k]) for k in range(H)]
        f = [sig(a[H + k]) for k in range(H)]
        o = [sig(a[2 * H + k]) for k in range(H)]
        g = [math.tanh(a[3 * H + k]) for k in range(H)]
        c = [f[k] * c[k] + i[k] * g[k] for k in range(H)]
        h = [o[k] * math.tanh(c[k]) for k in range(H)]
    return np.array(h), np.array(c)


def test_lstm_matches_scalar_recurrence():
    rng = Rng(9)
    cell = LstmCell.init(rng, 3, 4)
    cell.bias[:] += rng.normal(size=16) * 0.5
    xs = rng.normal(size=(3, 3))
    h, c = cell.zero_state()
    for x in xs:
        h, c = lstm_step(cell, x, h, c)
    ref_h, ref_c = _scalar_lstm(cell, xs)
    assert np.max(np.abs(h - ref_h)) < 1e-10
    assert np.max(np.abs(c - ref_c)) < 1e-10


def test_lstm_forget_bias_init():
    cell = LstmCell.init(Rng(0), 3, 4)
    assert cell.bias[4:8].tolist() == [1.0] * 4
    assert not cell.bias[:4].any() and not cell.bias[8:].any()


def test_lstm_shape_errors():
    cell = LstmCell.init(Rng(0), 3, 4)
    with pytest.raises(DimensionError):
        lstm_step(cell, np.zeros(3), np.zeros(5), np.zeros(4))
    with pytest.raises(DimensionError):
        lstm_step(cell, np.zeros(2), np.zeros(4), np.zeros(4))


def test_lstm_gradient_check():
    worst = 0.0
    for point in range(GRAD_POINTS):
        rng = Rng(200 + point)
        cell = LstmCell.init(rng.child("init"), 3, 4)
        for p in cell.params().values():
            p += rng.normal(0.0, 0.5, p.shape)
        x = rng.normal(size=(2, 3))
        h0 = rng.normal(size=(2, 4)) * 0.5
        c0 = rng.normal(size=(2, 4))
        rh, rc = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))

        def f():
            h, c = cell.step(x, h0, c0)
            return float((rh * h).sum() + (rc * c).sum())

        _, _, cache = cell.step_cached(x, h0, c0)
        grads, dx, dh0, dc0 = cell.backward(cache, rh, rc)
        for name, p in cell.params().items():
            worst = max(worst, rel_error(grads[name], numeric_grad(f, p)))
        for analytic, var in ((dx, x), (dh0, h0), (dc0, c0)):
            worst = max(worst, rel_error(analytic, numeric_grad(f, var)))
    assert worst < GRAD_TOL


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 20.0))
def test_lstm_hidden_bounded(seed, scale):
    rng = Rng(seed)
    cell = LstmCell.init(rng, 3, 4)
    for p in cell.params().values():
        p *= scale
    h, c = cell.zero_state()
    for _ in range(5):
        h, c = cell.step(rng.normal(0.0, scale, 3), h, c)
        assert np.all(np.abs(h) <= 1.0)


# -- softmax head ------------------------------------------------------------

def test_softmax_ce_uniform_two_classes():
    head = SoftmaxHead(np.zeros((2, 3)), np.zeros(2))
    loss, post = softmax_ce(head, np.ones(3), 1)
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    assert post.tolist() == [0.5, 0.5]


def test_softmax_ce_half_posterior():
    # logits [ln 1, ln 1, ln 2]: class 2 gets posterior 0.5
    head = SoftmaxHead(np.zeros((3, 1)), np.log([1.0, 1.0, 2.0]))
    loss, post = softmax_ce(head, np.zeros(1), 2)
    assert post[2] == pytest.approx(0.5, abs=1e-15)
    assert loss == pytest.approx(0.693147, abs=1e-6)


def test_softmax_ce_direct_formula():
    rng = Rng(12)
    head = SoftmaxHead.init(rng, 5, 4)
    head.bias[:] = rng.normal(size=4)
    x = rng.normal(size=5)
    z = head.weights @ x + head.bias
    ref = -(z[3] - math.log(sum(math.exp(v) for v in z)))
    loss, post = softmax_ce(head, x, 3)
    assert abs(loss - ref) < 1e-12
    assert abs(post.sum() - 1.0) < 1e-9


def test_softmax_ce_label_errors():
    head = SoftmaxHead.init(Rng(0), 2, 3)
    with pytest.raises(LabelError, match="out of range"):
        softmax_ce(head, np.zeros(2), 3)
    with pytest.raises(LabelError, match="frame 1"):
        head.forward_cached(np.zeros((2, 2)), [0, 7])


def test_softmax_head_needs_two_classes():
    with pytest.raises(ParameterError):
        SoftmaxHead(np.zeros((1, 3)), np.zeros(1))


def test_softmax_head_gradient_check():
    worst = 0.0
    for point in range(GRAD_POINTS):
        rng = Rng(300 + point)
        head = SoftmaxHead.init(rng.child("init"), 4, 5)
        head.bias[:] = rng.normal(size=5)
        x = rng.normal(size=(6, 4))
        labels = rng.integers(0, 5, 6)
        w = rng.uniform(0.0, 1.0, 6)

        def f():
            return head.forward_cached(x, labels, w)[0]

        _, _, cache = head.forward_cached(x, labels, w)
        grads, dx = head.backward(cache)
        for name, p in head.params().items():
            worst = max(worst, rel_error(grads[name], numeric_grad(f, p)))
        worst = max(worst, rel_error(dx, numeric_grad(f, x)))
    assert worst < GRAD_TOL


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 3))
def test_softmax_ce_nonnegative(seed, label):
    rng = Rng(seed)
    head = SoftmaxHead.init(rng, 3, 4)
    head.bias[:] = rng.normal(0, 5, 4)
    loss, _ = softmax_ce(head, rng.normal(size=3), label)
    assert loss >= 0.0


def test_softmax_ce_zero_only_when_certain():
    head = SoftmaxHead(np.zeros((2, 1)), np.array([800.0, 0.0]))
    loss, _ = softmax_ce(head, np.zeros(1), 0)
    assert loss == 0.0
