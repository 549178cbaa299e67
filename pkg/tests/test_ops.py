"""Convolution, pooling, and upconvolution against direct-loop oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lfam.errors import ContractError, ShapeError
from lfam.ops import (
    ConvParams,
    channel_norm,
    conv2d,
    he_conv,
    init_norm,
    maxpool2x2,
    upconv2x2,
)
from lfam.rng import make_rng
from lfam.tensor import Tape, Tensor, backward, grad_check, pow_const, sum_all


def conv_oracle(x, w, b, stride=1, pad=0):
    """Direct sliced-window convolution, one output element at a time."""
    n, ic, h, ww = x.shape
    oc, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (ww + 2 * pad - kw) // stride + 1
    out = np.zeros((n, oc, oh, ow), dtype=np.float64)
    for ni in range(n):
        for o in range(oc):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[ni, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[ni, o, i, j] = (patch * w[o]).sum() + b[o]
    return out


def make_params(rng, ic, oc, k, stride=1, pad=0, dtype=np.float64):
    w = rng.standard_normal((oc, ic, k, k)).astype(dtype)
    b = rng.standard_normal(oc).astype(dtype)
    return ConvParams(Tensor(w, requires_grad=True),
                      Tensor(b.reshape(1, oc, 1, 1), requires_grad=True),
                      stride=stride, padding=pad)


class TestConv2d:
    def test_constant_input_ones_kernel_interior(self):
        v = 0.7
        x = Tensor(np.full((1, 1, 5, 5), v, dtype=np.float64))
        p = ConvParams(Tensor(np.ones((1, 1, 3, 3), dtype=np.float64), requires_grad=True),
                       Tensor(np.zeros((1, 1, 1, 1), dtype=np.float64), requires_grad=True),
                       padding=1)
        y = conv2d(x, p)
        assert y.shape == (1, 1, 5, 5)
        np.testing.assert_allclose(y.data[0, 0, 1:-1, 1:-1], 9 * v, rtol=1e-12)

    def test_parameter_count_small_conv(self):
        p = he_conv(2, 4, 3, make_rng(0))
        assert p.weight.size + p.bias.size == 76

    @given(st.integers(0, 2**32 - 1), st.sampled_from([(1, 1, 0, 6), (3, 1, 1, 6), (3, 2, 1, 7), (2, 2, 0, 6)]))
    @settings(max_examples=20, deadline=None)
    def test_matches_direct_loop(self, seed, spec):
        k, stride, pad, size = spec
        rng = make_rng(seed)
        x = rng.standard_normal((2, 3, size, size))
        p = make_params(rng, 3, 2, k, stride, pad)
        got = conv2d(Tensor(x, dtype=np.float64), p).data
        want = conv_oracle(x, p.weight.data, p.bias.data.ravel(), stride, pad)
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)

    def test_padding_matches_manual_pad(self):
        rng = make_rng(4)
        x = rng.standard_normal((1, 2, 5, 5))
        p = make_params(rng, 2, 3, 3, pad=1)
        inner = ConvParams(p.weight, p.bias, stride=1, padding=0)
        manual = conv2d(Tensor(np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1))), dtype=np.float64), inner)
        np.testing.assert_allclose(conv2d(Tensor(x, dtype=np.float64), p).data, manual.data, rtol=1e-12)

    def test_channel_mismatch_rejected(self):
        p = make_params(make_rng(0), 3, 2, 3)
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 2, 5, 5))), p)

    def test_non_integer_output_rejected(self):
        p = make_params(make_rng(0), 1, 1, 2, stride=2)
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 1, 5, 5))), p)

    def test_gradients_all_inputs(self):
        rng = make_rng(2)
        x = rng.standard_normal((2, 2, 5, 5))
        p = make_params(rng, 2, 3, 3, pad=1)

        def wrt_x(t):
            return sum_all(pow_const(conv2d(t, p), 2.0))

        def wrt_w(t):
            q = ConvParams(t, p.bias, p.stride, p.padding)
            return sum_all(pow_const(conv2d(Tensor(x, dtype=np.float64), q), 2.0))

        def wrt_b(t):
            q = ConvParams(p.weight, t, p.stride, p.padding)
            return sum_all(pow_const(conv2d(Tensor(x, dtype=np.float64), q), 2.0))

        assert grad_check(wrt_x, Tensor(x, dtype=np.float64)) < 1e-4
        assert grad_check(wrt_w, p.weight) < 1e-4
        assert grad_check(wrt_b, p.bias) < 1e-4

    def test_strided_gradient(self):
        rng = make_rng(6)
        p = make_params(rng, 2, 2, 2, stride=2)
        x = rng.standard_normal((1, 2, 6, 6))
        assert grad_check(lambda t: sum_all(pow_const(conv2d(t, p), 2.0)),
                          Tensor(x, dtype=np.float64)) < 1e-4


class TestMaxpool:
    def test_known_blocks(self):
        x = np.array([[1.0, 2.0, 5.0, 5.0],
                      [3.0, 4.0, 5.0, 5.0],
                      [9.0, 8.0, 0.0, 3.0],
                      [7.0, 6.0, -2.0, 1.0]]).reshape(1, 1, 4, 4)
        y, idx = maxpool2x2(Tensor(x))
        np.testing.assert_array_equal(y.data[0, 0], [[4.0, 5.0], [9.0, 3.0]])
        # the all-fives block ties; first row-major position wins
        assert idx[0, 0, 0, 1] == 0
        assert idx[0, 0, 1, 1] == 1

    def test_odd_dims_rejected(self):
        with pytest.raises(ShapeError):
            maxpool2x2(Tensor(np.zeros((1, 1, 3, 4))))

    def test_gradient_routes_to_argmax_only(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        t = Tensor(x, requires_grad=True)
        with Tape() as tape:
            y, _ = maxpool2x2(t)
            loss = sum_all(y)
        backward(tape, loss)
        np.testing.assert_array_equal(t.grad[0, 0], [[0.0, 0.0], [0.0, 1.0]])

    def test_tied_gradient_goes_to_first_position(self):
        x = np.full((1, 1, 2, 2), 2.5)
        t = Tensor(x, requires_grad=True)
        with Tape() as tape:
            y, _ = maxpool2x2(t)
            loss = sum_all(y)
        backward(tape, loss)
        np.testing.assert_array_equal(t.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_gradient_numeric(self):
        rng = make_rng(8)
        # well-separated values keep the argmax stable under the probe eps
        x = rng.standard_normal((2, 3, 4, 4)) * 10
        assert grad_check(lambda t: sum_all(pow_const(maxpool2x2(t)[0], 2.0)),
                          Tensor(x, dtype=np.float64)) < 1e-4


class TestUpconv:
    def test_shape_doubles(self):
        rng = make_rng(0)
        p = make_params(rng, 3, 2, 2, stride=2)
        y = upconv2x2(Tensor(rng.standard_normal((2, 3, 4, 5)), dtype=np.float64), p)
        assert y.shape == (2, 2, 8, 10)

    def test_single_pixel_paints_kernel(self):
        w = np.arange(4, dtype=np.float64).reshape(1, 1, 2, 2)
        p = ConvParams(Tensor(w, requires_grad=True),
                       Tensor(np.zeros((1, 1, 1, 1), dtype=np.float64), requires_grad=True),
                       stride=2)
        x = np.zeros((1, 1, 2, 2))
        x[0, 0, 1, 0] = 2.0
        y = upconv2x2(Tensor(x, dtype=np.float64), p)
        want = np.zeros((1, 1, 4, 4))
        want[0, 0, 2:4, 0:2] = 2.0 * w[0, 0]
        np.testing.assert_array_equal(y.data, want)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_adjoint_of_strided_conv(self, seed):
        # <conv(x), u> == <x, upconv(u)> when the upconv weight swaps in/out axes
        rng = make_rng(seed)
        w = rng.standard_normal((3, 2, 2, 2))
        down = ConvParams(Tensor(w, requires_grad=True),
                          Tensor(np.zeros((1, 3, 1, 1), dtype=np.float64), requires_grad=True),
                          stride=2)
        up = ConvParams(Tensor(w.transpose(1, 0, 2, 3).copy(), requires_grad=True),
                        Tensor(np.zeros((1, 2, 1, 1), dtype=np.float64), requires_grad=True),
                        stride=2)
        x = rng.standard_normal((1, 2, 6, 6))
        u = rng.standard_normal((1, 3, 3, 3))
        lhs = (conv2d(Tensor(x, dtype=np.float64), down).data * u).sum()
        rhs = (x * upconv2x2(Tensor(u, dtype=np.float64), up).data).sum()
        np.testing.assert_allclose(lhs, rhs, rtol=1e-10)

    def test_wrong_kernel_rejected(self):
        rng = make_rng(0)
        with pytest.raises(ContractError):
            upconv2x2(Tensor(np.zeros((1, 3, 4, 4))), make_params(rng, 3, 2, 3))

    def test_gradients_all_inputs(self):
        rng = make_rng(3)
        x = rng.standard_normal((1, 2, 3, 3))
        p = make_params(rng, 2, 3, 2, stride=2)

        def wrt_x(t):
            return sum_all(pow_const(upconv2x2(t, p), 2.0))

        def wrt_w(t):
            q = ConvParams(t, p.bias, 2, 0)
            return sum_all(pow_const(upconv2x2(Tensor(x, dtype=np.float64), q), 2.0))

        def wrt_b(t):
            q = ConvParams(p.weight, t, 2, 0)
            return sum_all(pow_const(upconv2x2(Tensor(x, dtype=np.float64), q), 2.0))

        assert grad_check(wrt_x, Tensor(x, dtype=np.float64)) < 1e-4
        assert grad_check(wrt_w, p.weight) < 1e-4
        assert grad_check(wrt_b, p.bias) < 1e-4

    def test_pool_then_upconv_restores_shape(self):
        rng = make_rng(5)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)))
        pooled, _ = maxpool2x2(x)
        p = he_conv(3, 3, 2, rng, stride=2)
        assert upconv2x2(pooled, p).shape == x.shape


class TestChannelNorm:
    def test_standardizes_each_plane(self):
        rng = make_rng(1)
        x = Tensor(rng.standard_normal((2, 3, 6, 6)) * 4 + 2, dtype=np.float64)
        y = channel_norm(x, init_norm(3, dtype=np.float64))
        np.testing.assert_allclose(y.data.mean(axis=(2, 3)), 0.0, atol=1e-10)
        np.testing.assert_allclose(y.data.std(axis=(2, 3)), 1.0, atol=1e-3)

    def test_gradient(self):
        rng = make_rng(2)
        x = rng.standard_normal((1, 2, 4, 4))
        norm = init_norm(2, dtype=np.float64)
        assert grad_check(lambda t: sum_all(pow_const(channel_norm(t, norm), 2.0)),
                          Tensor(x, dtype=np.float64)) < 1e-4


class TestInit:
    def test_he_scale_and_flags(self):
        rng = make_rng(0)
        p = he_conv(8, 16, 3, rng)
        assert p.weight.dtype == np.float32
        assert p.weight.requires_grad and p.bias.requires_grad
        np.testing.assert_array_equal(p.bias.data, 0.0)
        std = p.weight.data.std()
        want = np.sqrt(2.0 / (8 * 9))
        assert 0.8 * want < std < 1.2 * want
