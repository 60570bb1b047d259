"""Finite-difference checks of every differentiable primitive.

Each case projects the op output against a fixed random map and reduces to
a scalar, so gradients are non-trivial everywhere.  Inputs are nudged away
from the measure-zero kinks of relu/maxpool/bilinear corners before
differencing.
"""

import numpy as np
import pytest

from crowdflow.tensorcore import (
    Tensor, add, bilinear_sample, channel_max, channel_mean, concat, conv2d,
    deform_conv2d, fully_connected, global_avg_pool, global_max_pool,
    l2_normalize, maxpool2d, mul, relu, scale, shift, sigmoid, sqrt, sub,
    sum_all, take_batch, upsample_bilinear2x,
)
from helpers import check_gradients


def _param(rng, shape, away_from_zero=False):
    data = rng.normal(size=shape)
    if away_from_zero:
        small = np.abs(data) < 1e-3
        data = np.where(small, data + np.sign(data + 1e-12) * 2e-3, data)
    return Tensor(data, requires_grad=True)


def _project(out, rng):
    probe = Tensor(rng.normal(size=out.shape))
    return sum_all(mul(out, probe))


def test_elementwise_arith(rng):
    a = _param(rng, (1, 2, 3, 3))
    b = _param(rng, (1, 2, 3, 3))
    check_gradients(lambda: _project(mul(add(a, b), sub(a, b)), np.random.default_rng(0)),
                    [a, b], rng)


def test_broadcast_mul(rng):
    a = _param(rng, (2, 4, 3, 3))
    gate = _param(rng, (2, 1, 3, 3))
    chan = _param(rng, (2, 4, 1, 1))
    check_gradients(lambda: _project(mul(mul(a, gate), chan),
                                     np.random.default_rng(1)),
                    [a, gate, chan], rng)


def test_scale_shift_sqrt(rng):
    x = Tensor(rng.uniform(0.5, 2.0, size=(1, 2, 3, 3)), requires_grad=True)
    check_gradients(lambda: _project(sqrt(shift(scale(x, 1.7), 3.0), eps=1e-12),
                                     np.random.default_rng(2)),
                    [x], rng)


def test_relu(rng):
    x = _param(rng, (2, 3, 4, 4), away_from_zero=True)
    check_gradients(lambda: _project(relu(x), np.random.default_rng(3)), [x], rng)


def test_sigmoid(rng):
    x = _param(rng, (2, 3, 4, 4))
    check_gradients(lambda: _project(sigmoid(x), np.random.default_rng(4)), [x], rng)


def test_concat(rng):
    a = _param(rng, (1, 2, 3, 3))
    b = _param(rng, (1, 3, 3, 3))
    check_gradients(lambda: _project(concat([a, b]), np.random.default_rng(5)),
                    [a, b], rng)


@pytest.mark.parametrize("stride,padding,dilation", [(1, 1, 1), (2, 0, 1), (1, 2, 2)])
def test_conv2d(rng, stride, padding, dilation):
    x = _param(rng, (2, 3, 6, 6))
    w = _param(rng, (4, 3, 3, 3))
    b = _param(rng, (1, 4, 1, 1))
    check_gradients(
        lambda: _project(conv2d(x, w, b, stride=stride, padding=padding,
                                dilation=dilation), np.random.default_rng(6)),
        [x, w, b], rng)


def test_deform_conv2d(rng):
    x = _param(rng, (1, 2, 6, 6))
    w = _param(rng, (2, 2, 3, 3))
    b = _param(rng, (1, 2, 1, 1))
    # fractional parts well inside (0, 1) keep finite differences off the
    # bilinear kinks at integer coordinates
    base = rng.integers(-1, 2, size=(1, 18, 6, 6)).astype(float)
    offs = Tensor(base + rng.uniform(0.25, 0.75, size=base.shape), requires_grad=True)
    check_gradients(
        lambda: _project(deform_conv2d(x, w, offs, b, padding=1),
                         np.random.default_rng(7)),
        [x, w, offs, b], rng, entries_per_input=10)


def test_maxpool(rng):
    x = _param(rng, (2, 2, 6, 6))
    check_gradients(lambda: _project(maxpool2d(x), np.random.default_rng(8)),
                    [x], rng)


def test_upsample(rng):
    x = _param(rng, (1, 3, 3, 4))
    check_gradients(lambda: _project(upsample_bilinear2x(x),
                                     np.random.default_rng(9)),
                    [x], rng)


def test_global_pools(rng):
    x = _param(rng, (2, 3, 4, 4))
    check_gradients(
        lambda: _project(add(global_avg_pool(x), global_max_pool(x)),
                         np.random.default_rng(10)),
        [x], rng)


def test_channel_stats(rng):
    x = _param(rng, (2, 4, 3, 3))
    check_gradients(
        lambda: _project(concat([channel_mean(x), channel_max(x)]),
                         np.random.default_rng(11)),
        [x], rng)


def test_fully_connected(rng):
    x = _param(rng, (3, 5, 1, 1))
    w = _param(rng, (2, 5, 1, 1))
    b = _param(rng, (1, 2, 1, 1))
    check_gradients(lambda: _project(fully_connected(x, w, b),
                                     np.random.default_rng(12)),
                    [x, w, b], rng)


def test_l2_normalize(rng):
    x = Tensor(rng.normal(size=(1, 4, 3, 3)) + 0.3, requires_grad=True)
    check_gradients(lambda: _project(l2_normalize(x), np.random.default_rng(13)),
                    [x], rng)


def test_bilinear_sample(rng):
    x = _param(rng, (1, 3, 6, 6))
    pts = rng.uniform(0.3, 4.6, size=(5, 2))
    check_gradients(lambda: _project(bilinear_sample(x, pts),
                                     np.random.default_rng(14)),
                    [x], rng)


def test_take_batch(rng):
    x = _param(rng, (3, 2, 2, 2))
    check_gradients(lambda: _project(take_batch(x, 1), np.random.default_rng(15)),
                    [x], rng)


def test_composed_chain(rng):
    # conv -> relu -> pool -> upsample -> sigmoid, differentiated end to end
    x = _param(rng, (1, 2, 8, 8))
    w1 = _param(rng, (3, 2, 3, 3))
    w2 = _param(rng, (1, 3, 3, 3))

    def build():
        h = relu(conv2d(x, w1, padding=1))
        h = maxpool2d(h)
        h = conv2d(h, w2, padding=1)
        h = upsample_bilinear2x(h)
        return _project(sigmoid(h), np.random.default_rng(16))

    check_gradients(build, [x, w1, w2], rng)
