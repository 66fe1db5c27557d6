import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from layoutfm.nn import tensor as T
from layoutfm.nn.gradcheck import grad_check
from layoutfm.nn.layers import (Conv2d, ConvSpec, Downsample, GroupNorm, ResidualBlock, SelfAttention,
                                Sequential, Upsample, build_layer, ReLUSpec, SigmoidSpec)
from layoutfm.nn.optim import AdamState, adam_step
from layoutfm.nn.tensor import ConfigError, DimensionError, NumericError, Tensor


def _direct_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for r in range(ho):
                for cc in range(wo):
                    patch = xp[ni, :, r * stride:r * stride + k, cc * stride:cc * stride + k]
                    out[ni, oi, r, cc] = (patch * w[oi]).sum() + (b[oi] if b is not None else 0)
    return out


# --------------------------------------------------------------------------- conv

def test_conv_identity_1x1():
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    y = T.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
    assert np.array_equal(y.data, x)


def test_conv_impulse_gives_block():
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 1
    y = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), pad=1).data[0, 0]
    expect = np.zeros((5, 5))
    expect[1:4, 1:4] = 1
    assert np.array_equal(y, expect)


def test_conv_stride_shape():
    y = T.conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((3, 2, 3, 3))), stride=2, pad=1)
    assert y.shape == (1, 3, 3, 3)


def test_conv_shape_errors_name_axes():
    with pytest.raises(DimensionError, match="axis 1"):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))))
    with pytest.raises(DimensionError, match="spatial"):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 2, 3, 3))), stride=2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from([(1, 0, 1), (3, 1, 1), (3, 1, 2), (3, 0, 1), (5, 2, 1)]))
def test_conv_matches_direct_summation(seed, kps):
    k, pad, stride = kps
    rng = np.random.default_rng(seed)
    n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    h = int(rng.integers(k, 8))
    while (h + 2 * pad - k) % stride:
        h += 1
    x = rng.standard_normal((n, c, h, h))
    w = rng.standard_normal((o, c, k, k))
    b = rng.standard_normal(o)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad).data
    assert np.allclose(got, _direct_conv(x, w, b, stride, pad), atol=1e-10)


def test_conv_grad_check():
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    err = grad_check(lambda a, c, d: T.conv2d(a, c, d, stride=1, pad=1), [Tensor(x), Tensor(w), Tensor(b)])
    assert err < 1e-5
    err = grad_check(lambda a, c: T.conv2d(a, c, stride=2, pad=1), [Tensor(x), Tensor(w)])
    assert err < 1e-5


# --------------------------------------------------------------------------- group norm

def test_group_norm_matches_formula():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 8, 3, 3))
    gamma, beta = rng.standard_normal(8), rng.standard_normal(8)
    y = T.group_norm(Tensor(x), 4, Tensor(gamma), Tensor(beta)).data
    xg = x.reshape(2, 4, -1)
    ref = ((xg - xg.mean(2, keepdims=True)) / np.sqrt(xg.var(2, keepdims=True) + 1e-5)).reshape(x.shape)
    assert np.allclose(y, ref * gamma[None, :, None, None] + beta[None, :, None, None])


def test_group_norm_groups_must_divide():
    with pytest.raises(ConfigError):
        GroupNorm(6, 4)


# --------------------------------------------------------------------------- attention

def _attention_oracle(att: SelfAttention, x):
    n, c, h, w = x.shape
    hd, d = att.heads, c // att.heads

    def proj(conv, v):
        return np.einsum("oc,ncs->nos", conv.weight.data[:, :, 0, 0].astype(np.float64),
                         v.reshape(n, c, -1)) + conv.bias.data[None, :, None]

    q, k, v = (proj(m, x).reshape(n, hd, d, -1) for m in (att.q, att.k, att.v))
    out = np.zeros((n, hd, d, h * w))
    for ni in range(n):
        for hi in range(hd):
            s = q[ni, hi].T @ k[ni, hi] / math.sqrt(d)
            a = np.exp(s - s.max(1, keepdims=True))
            a /= a.sum(1, keepdims=True)
            out[ni, hi] = v[ni, hi] @ a.T
    return x + proj(att.out, out.reshape(n, c, h * w)).reshape(x.shape)


def test_group_norm_grad_check():
    rng = np.random.default_rng(12)
    x, g, b = rng.standard_normal((2, 4, 3, 3)), rng.standard_normal(4), rng.standard_normal(4)
    assert grad_check(lambda a, c, d: T.group_norm(a, 2, c, d), [Tensor(x), Tensor(g), Tensor(b)]) < 1e-5


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_grad_check_random_conv_norm_relu(seed):
    rng = np.random.default_rng(seed)
    x, w = rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((4, 2, 3, 3))
    g, b = rng.standard_normal(4), rng.standard_normal(4)

    def f(a, c):
        return T.relu(T.group_norm(T.conv2d(a, c, pad=1), 2, Tensor(g), Tensor(b)))
    assert grad_check(f, [Tensor(x), Tensor(w)]) < 1e-4


def test_attention_matches_oracle():
    rng = np.random.default_rng(3)
    att = SelfAttention(4, 2, rng).astype(np.float64)
    x = rng.standard_normal((2, 4, 3, 2))
    assert np.allclose(att(Tensor(x)).data, _attention_oracle(att, x))
    assert np.allclose(att.last_weights.sum(-1), 1.0, atol=1e-6)


def test_attention_single_token():
    rng = np.random.default_rng(4)
    att = SelfAttention(4, 1, rng).astype(np.float64)
    x = rng.standard_normal((1, 4, 1, 1))
    v = att.v(Tensor(x))
    assert np.allclose(att(Tensor(x)).data, x + att.out(v).data)


def test_attention_zero_out_is_identity():
    att = SelfAttention(4, 2, np.random.default_rng(5), zero_out=True)
    x = np.random.default_rng(6).standard_normal((1, 4, 2, 2)).astype(np.float32)
    assert np.array_equal(att(Tensor(x)).data, x)


def test_attention_uniform_input_uniform_weights():
    att = SelfAttention(4, 2, np.random.default_rng(7))
    att(Tensor(np.ones((1, 4, 3, 3), np.float32)))
    assert np.allclose(att.last_weights, 1 / 9, atol=1e-6)


def test_attention_heads_must_divide():
    with pytest.raises(ConfigError):
        SelfAttention(6, 4, np.random.default_rng(0))


def test_attention_grad_check():
    att = SelfAttention(4, 2, np.random.default_rng(8)).astype(np.float64)
    x = np.random.default_rng(9).standard_normal((1, 4, 2, 2))
    assert grad_check(att, [Tensor(x)]) < 1e-4


# --------------------------------------------------------------------------- residual / up / down

def test_residual_zero_inner_is_identity():
    blk = ResidualBlock(8, 8, np.random.default_rng(0))
    for conv in (blk.conv1, blk.conv2):
        conv.weight.data[...] = 0
        conv.bias.data[...] = 0
    x = np.random.default_rng(1).standard_normal((1, 8, 4, 4)).astype(np.float32)
    assert np.array_equal(blk(Tensor(x)).data, x)


def test_residual_channel_change_shape():
    blk = ResidualBlock(8, 16, np.random.default_rng(0))
    assert blk(Tensor(np.zeros((2, 8, 6, 6), np.float32))).shape == (2, 16, 6, 6)


def test_residual_grad_check():
    blk = ResidualBlock(4, 8, np.random.default_rng(2)).astype(np.float64)
    x = np.random.default_rng(3).standard_normal((2, 4, 4, 4))
    assert grad_check(blk, [Tensor(x)]) < 1e-5


def test_up_down_shapes():
    rng = np.random.default_rng(0)
    assert Downsample(4, 8, rng)(Tensor(np.zeros((1, 4, 8, 8), np.float32))).shape == (1, 8, 4, 4)
    assert Upsample(8, 4, rng)(Tensor(np.zeros((1, 8, 4, 4), np.float32))).shape == (1, 4, 8, 8)
    with pytest.raises(DimensionError):
        Downsample(4, 8, rng)(Tensor(np.zeros((1, 4, 5, 5), np.float32)))


def test_even_kernel_rejected():
    with pytest.raises(ConfigError):
        build_layer(ConvSpec(2, 2, k=2), np.random.default_rng(0))


def test_sequential_from_specs():
    seq = Sequential([ConvSpec(2, 4), ReLUSpec(), ConvSpec(4, 1, k=1), SigmoidSpec()],
                     np.random.default_rng(0))
    y = seq(Tensor(np.random.default_rng(1).standard_normal((1, 2, 4, 4)).astype(np.float32)))
    assert y.shape == (1, 1, 4, 4) and (y.data > 0).all() and (y.data < 1).all()


# --------------------------------------------------------------------------- sigmoid and dice

@settings(max_examples=30, deadline=None)
@given(st.floats(-1e4, 1e4))
def test_sigmoid_strictly_inside(z):
    for dt in (np.float32, np.float64):
        v = T.sigmoid(Tensor(np.array([z], dt))).data[0]
        assert 0 < v < 1


def test_dice_examples():
    t = np.ones((1, 1, 2, 2))
    assert float(T.soft_dice_loss(Tensor(t), t).data) == 0.0
    z = np.zeros((1, 1, 2, 2))
    assert float(T.soft_dice_loss(Tensor(z), z).data) == 0.0
    t2 = np.array([[[[1, 1], [0, 0]]]], float)
    assert float(T.soft_dice_loss(Tensor(np.full((1, 1, 2, 2), 0.5)), t2).data) == pytest.approx(0.4)
    with pytest.raises(ValueError):
        T.soft_dice_loss(Tensor(np.full((1, 1, 2, 2), 1.5)), t2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_dice_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    p = rng.random((2, 3, 4, 4))
    t = (rng.random((2, 3, 4, 4)) < 0.3).astype(float)
    v = float(T.soft_dice_loss(Tensor(p), t).data)
    assert 0.0 <= v <= 1.0


def test_dice_grad_check():
    rng = np.random.default_rng(5)
    p = rng.random((2, 3, 4, 4)) * 0.8 + 0.1
    t = (rng.random((2, 3, 4, 4)) < 0.4).astype(float)
    assert grad_check(lambda a: T.soft_dice_loss(a, t), [Tensor(p)]) < 1e-5


# --------------------------------------------------------------------------- Adam

def test_adam_zero_grad_no_change():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    adam_step([p], [np.zeros(2)], AdamState(lr=0.1))
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_closed_form():
    g, lr = 0.37, 0.01
    p = Tensor(np.array([0.5]), requires_grad=True)
    adam_step([p], [np.array([g])], AdamState(lr=lr))
    assert p.data[0] == pytest.approx(0.5 - lr * g / (abs(g) + 1e-8), rel=1e-12)


def test_adam_replay_is_deterministic():
    grads = [np.array([0.3, -0.1]), np.array([0.2, 0.4])]
    a = Tensor(np.zeros(2), requires_grad=True)
    s = AdamState(lr=0.05)
    for g in grads:
        adam_step([a], [g], s)
    b = Tensor(np.zeros(2), requires_grad=True)
    s2 = AdamState(lr=0.05)
    adam_step([b], [grads[0]], s2)
    replay = s2.copy()
    c = Tensor(b.data.copy(), requires_grad=True)
    adam_step([b], [grads[1]], s2)
    adam_step([c], [grads[1]], replay)
    assert np.array_equal(a.data, b.data) and np.array_equal(b.data, c.data)


# --------------------------------------------------------------------------- checker and debug

def test_grad_check_flags_wrong_backward():
    def bad(x):
        return T._node(x.data * 2, (x,), lambda g: (g * 3,), "bad")
    assert grad_check(bad, [Tensor(np.ones((2, 2)))]) > 0.1


def test_grad_check_non_finite_raises():
    def blowup(x):
        return T._node(x.data / 0.0, (x,), lambda g: (g,), "inf")
    with np.errstate(divide="ignore"), pytest.raises(NumericError):
        grad_check(blowup, [Tensor(np.ones(2))])


def test_debug_mode_catches_nan():
    T.set_debug(True)
    try:
        with pytest.raises(NumericError), np.errstate(invalid="ignore"):
            T.mul(Tensor(np.array([np.inf])), 0.0)
    finally:
        T.set_debug(False)


def test_forward_bitwise_deterministic():
    blk = ResidualBlock(4, 8, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).standard_normal((2, 4, 8, 8)).astype(np.float32))
    assert np.array_equal(blk(x).data, blk(x).data)
