import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from terse.core import (SGD, Adam, BatchNorm, Conv2d, Dropout, Flatten,
                        InstanceNorm2d, LeakyReLU, Linear, MaxPool2d, Param,
                        ReLU, Sequential, ShapeError, softmax,
                        softmax_cross_entropy, xavier_uniform)
from terse.core.gradcheck import check_module, numerical_gradient, relative_error

TRIALS = 20


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(n):
        for o in range(f):
            for y in range(ho):
                for z in range(wo):
                    acc = b[o]
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, ci, y * stride + u, z * stride + v] * w[o, ci, u, v]
                    out[i, o, y, z] = acc
    return out


def as64(module):
    return module.astype(np.float64)


def randomize(module, rng):
    for p in module.params():
        p.value = rng.standard_normal(p.shape)
    return module


# conv2d

def test_conv_identity_kernel():
    conv = Conv2d(1, 1, 1)
    conv.weight.value[...] = 1
    x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
    np.testing.assert_array_equal(conv.forward(x)[0], x)


def test_conv_two_by_two():
    conv = Conv2d(1, 1, 2)
    conv.weight.value[0, 0] = [[1, 0], [0, 1]]
    x = np.array([[[[1, 2], [3, 4]]]], np.float32)
    np.testing.assert_array_equal(conv.forward(x)[0], [[[[5]]]])


@pytest.mark.parametrize("trial", range(6))
def test_conv_matches_naive_loops(trial):
    rng = np.random.default_rng(trial)
    n, c, f = rng.integers(1, 5, size=3)
    h = int(rng.integers(5, 17))
    k = int(rng.integers(1, 6))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 3))
    conv = randomize(as64(Conv2d(c, f, k, stride, pad)), rng)
    x = rng.standard_normal((n, c, h, h))
    ref = naive_conv(x, conv.weight.value, conv.bias.value, stride, pad)
    np.testing.assert_allclose(conv.forward(x)[0], ref, atol=1e-5)


def test_conv_rejects_channel_mismatch():
    conv = Conv2d(3, 4, 3)
    with pytest.raises(ShapeError, match=r"\(2, 2, 8, 8\).*\(4, 3, 3, 3\)"):
        conv.forward(np.zeros((2, 2, 8, 8), np.float32))


# (6, 2) narrows the channels, which takes the flipped-kernel input gradient
@pytest.mark.parametrize("stride,pad,c_in,c_out",
                         [(1, 0, 3, 4), (2, 1, 3, 4), (1, 2, 3, 4), (1, 0, 6, 2), (1, 1, 6, 2)])
def test_conv_gradients(stride, pad, c_in, c_out):
    rng = np.random.default_rng(stride * 10 + pad + c_in)
    for _ in range(TRIALS):
        conv = randomize(as64(Conv2d(c_in, c_out, 3, stride, pad)), rng)
        x = rng.standard_normal((2, c_in, 8, 8))
        errs = check_module(conv, x, rng)
        assert max(errs.values()) < 1e-5, errs


# maxpool

def test_maxpool_constant_and_single_window():
    pool = MaxPool2d(2)
    const = np.full((1, 2, 4, 4), 3.0)
    np.testing.assert_array_equal(pool.forward(const)[0], np.full((1, 2, 2, 2), 3.0))
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    np.testing.assert_array_equal(pool.forward(x)[0], [[[[4.0]]]])


def test_maxpool_tie_routes_to_first_index():
    pool = MaxPool2d(2)
    x = np.ones((1, 1, 2, 2))
    y, cache = pool.forward(x)
    dx = pool.backward(np.ones_like(y), cache)
    np.testing.assert_array_equal(dx[0, 0], [[1, 0], [0, 0]])


def test_maxpool_rejects_large_window():
    with pytest.raises(ShapeError):
        MaxPool2d(5).forward(np.zeros((1, 1, 4, 4)))


@pytest.mark.parametrize("window,stride", [(2, 2), (3, 2)])
def test_maxpool_gradients(window, stride):
    rng = np.random.default_rng(window)
    for _ in range(TRIALS):
        # a permutation gives unique maxima separated by >> eps
        x = rng.permutation(2 * 3 * 9 * 9).reshape(2, 3, 9, 9).astype(np.float64)
        errs = check_module(MaxPool2d(window, stride), x, rng)
        assert errs["input"] < 1e-5


# dense layers

def test_relu():
    y, _ = ReLU().forward(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(y, [0, 0, 2])


def test_batchnorm_zero_variance_batch():
    bn = BatchNorm(3)
    x = np.full((8, 3, 4, 4), 5.0, np.float32)
    y, _ = bn.forward(x)
    assert np.abs(y).max() <= 1e-2


def test_batchnorm_eval_uses_running_stats():
    rng = np.random.default_rng(0)
    bn = BatchNorm(4)
    for _ in range(50):
        bn.forward(rng.normal(2.0, 3.0, (64, 4)).astype(np.float32))
    np.testing.assert_allclose(bn.running_mean, 2.0, atol=0.3)
    np.testing.assert_allclose(bn.running_var, 9.0, rtol=0.2)
    bn.eval()
    ref = rng.standard_normal((1, 4)).astype(np.float32)
    before = bn.forward(ref)[0]
    bn.forward(rng.normal(1e3, 1e2, (64, 4)).astype(np.float32))
    np.testing.assert_array_equal(bn.forward(ref)[0], before)


def test_dropout_eval_is_identity():
    d = Dropout(0.5).eval()
    x = np.random.default_rng(0).random((4, 5))
    y, _ = d.forward(x)
    assert y is x


def test_dropout_scales_survivors():
    d = Dropout(0.5)
    x = np.ones((200, 50))
    y, _ = d.forward(x)
    assert set(np.unique(y)) == {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05


def test_dropout2d_drops_whole_channels():
    d = Dropout(0.5, channelwise=True)
    y, _ = d.forward(np.ones((8, 6, 5, 5)))
    per_channel = y.reshape(8, 6, -1)
    assert np.all(per_channel.min(axis=2) == per_channel.max(axis=2))


def test_dropout_masks_keyed_on_step():
    d = Dropout(0.5)
    d.seed, d.layer_id = 3, 7
    x = np.ones((10, 10))
    d.step, d.calls = 4, 0
    a = d.forward(x)[0]
    d.step, d.calls = 4, 0
    b = d.forward(x)[0]
    d.step, d.calls = 5, 0
    c = d.forward(x)[0]
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("make,shape", [
    (lambda: Linear(7, 5), (4, 7)),
    (lambda: BatchNorm(5), (6, 5)),
    (lambda: BatchNorm(3), (4, 3, 5, 5)),
    (lambda: InstanceNorm2d(), (3, 2, 5, 5)),
    (lambda: LeakyReLU(0.2), (4, 9)),
    (lambda: Sequential(Linear(6, 4), ReLU(), Dropout(0.5), Linear(4, 3)), (5, 6)),
    (lambda: Sequential(Conv2d(1, 2, 3), Dropout(0.5, True), Flatten(), Linear(18, 2)), (3, 1, 5, 5)),
])
def test_dense_layer_gradients(make, shape):
    rng = np.random.default_rng(len(shape))
    for _ in range(TRIALS):
        layer = randomize(as64(make()), rng)
        for p in layer.params():
            if p.value.ndim == 1 and isinstance(layer, BatchNorm):
                p.value = np.abs(p.value) + 0.5
        x = rng.standard_normal(shape)
        errs = check_module(layer, x, rng)
        assert max(errs.values()) < 1e-5, errs


def test_batchnorm_eval_gradients():
    rng = np.random.default_rng(1)
    bn = as64(BatchNorm(4))
    bn.forward(rng.standard_normal((16, 4)))
    bn.eval()
    errs = check_module(bn, rng.standard_normal((5, 4)), rng)
    assert max(errs.values()) < 1e-5


# softmax cross-entropy

def test_uniform_logits_loss_is_ln10():
    loss, probs, _ = softmax_cross_entropy(np.zeros((3, 10)), np.array([0, 4, 9]))
    assert loss == pytest.approx(math.log(10), abs=1e-12)
    np.testing.assert_allclose(probs, 0.1)


def test_saturated_logit_loss_is_zero():
    logits = np.zeros((1, 10))
    logits[0, 3] = 1000.0
    loss, _, _ = softmax_cross_entropy(logits, np.array([3]))
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_gradient():
    rng = np.random.default_rng(2)
    for _ in range(TRIALS):
        logits = rng.standard_normal((4, 10)) * 3
        labels = rng.integers(0, 10, 4)
        _, _, grad = softmax_cross_entropy(logits, labels)
        idx = np.arange(logits.size)
        num = numerical_gradient(lambda: softmax_cross_entropy(logits, labels)[0], logits, idx)
        assert relative_error(grad.ravel(), num) < 1e-5


def test_cross_entropy_rejects_bad_input():
    with pytest.raises(FloatingPointError):
        softmax_cross_entropy(np.array([[np.nan, 0.0]]), np.array([0]))
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((1, 3)), np.array([3]))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=2, max_size=12))
def test_softmax_rows_sum_to_one(row):
    p = softmax(np.array([row]))
    assert abs(p.sum() - 1.0) <= 1e-6


# optimizers

def _param(value, grad):
    p = Param(np.array(value, np.float64))
    p.grad[...] = grad
    return p


def test_sgd_plain_step_and_grad_cleared():
    p = _param([1.0, -2.0], [0.5, 0.25])
    SGD([p], lr=0.1).step()
    np.testing.assert_allclose(p.value, [0.95, -2.025])
    np.testing.assert_array_equal(p.grad, 0)


def test_sgd_momentum_second_step():
    g = np.array([0.3, -1.2])
    p = _param([0.0, 0.0], g)
    opt = SGD([p], lr=0.01, momentum=0.5)
    opt.step()
    after_first = p.value.copy()
    p.grad[...] = g
    opt.step()
    np.testing.assert_allclose(after_first - p.value, 1.5 * 0.01 * g, rtol=1e-12)


def test_adam_first_step_is_signed_lr():
    g = np.array([3.0, -1e-3, 0.2])
    p = _param([0.0, 0.0, 0.0], g)
    Adam([p], lr=1e-3).step()
    np.testing.assert_allclose(p.value, -1e-3 * np.sign(g), atol=1e-6)


def test_weight_decay_is_coupled():
    p = _param([2.0], [0.0])
    SGD([p], lr=0.1, weight_decay=0.5).step()
    np.testing.assert_allclose(p.value, [2.0 - 0.1 * 0.5 * 2.0])


@pytest.mark.parametrize("lr", [0.0, -1e-3])
def test_nonpositive_lr_rejected(lr):
    with pytest.raises(ValueError):
        SGD([], lr=lr)
    with pytest.raises(ValueError):
        Adam([], lr=lr)


# xavier

def test_xavier_bound_and_determinism():
    w = xavier_uniform((3, 3), gain=0.4, seed=11)
    assert np.all(np.abs(w) <= 0.4)
    np.testing.assert_array_equal(w, xavier_uniform((3, 3), gain=0.4, seed=11))


def test_xavier_variance():
    fan_in, fan_out = 300, 200
    w = xavier_uniform((10 ** 5,), gain=0.4, seed=5, fan=(fan_in, fan_out), dtype=np.float64)
    expected = 0.4 ** 2 * 2 / (fan_in + fan_out)
    assert abs(w.var() / expected - 1) < 0.2


def test_xavier_rejects_nonpositive_gain():
    with pytest.raises(ValueError):
        xavier_uniform((2, 2), gain=0.0, seed=0)
