from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patconv import (ConvSpec, DataError, DenseConvLayer, ShapeError, Tensor4D, conv2d_im2col,
                     conv2d_reference, extended_pattern_set, mac_count, prune_layer,
                     relative_error)

GRID = np.arange(1, 10, dtype=np.float32).reshape(1, 1, 3, 3)


def fraction_conv(x, w, b, stride, pad):
    """Exact convolution over Python Fractions, written as the plain quadruple loop."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.empty((n, f, ho, wo), dtype=object)

    def at(img, ch, r, col):
        r, col = r - pad, col - pad
        if 0 <= r < h and 0 <= col < wd:
            return Fraction(float(x[img, ch, r, col]))
        return Fraction(0)

    for img in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    s = Fraction(float(b[o]))
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                s += Fraction(float(w[o, ch, u, v])) * at(img, ch, i * stride + u,
                                                                         j * stride + v)
                    out[img, o, i, j] = s
    return out


def test_all_ones_kernel_sums_grid():
    layer = DenseConvLayer(np.ones((1, 1, 3, 3), np.float32))
    y = conv2d_reference(GRID, layer, ConvSpec(3, 3, 1, 0))
    assert y.shape == (1, 1, 1, 1)
    assert y.data[0, 0, 0, 0] == 45


def test_identity_kernel_passthrough():
    w = np.zeros((1, 1, 3, 3), np.float32)
    w[0, 0, 1, 1] = 1
    y = conv2d_reference(GRID, DenseConvLayer(w), ConvSpec(3, 3, 1, 1))
    np.testing.assert_array_equal(y.data, GRID)


def test_elog_kernel_on_grid():
    w = np.array([[0, 1, 0], [1, 8, 1], [0, 1, 0]], np.float32).reshape(1, 1, 3, 3)
    y = conv2d_reference(GRID, DenseConvLayer(w), ConvSpec(3, 3, 1, 0))
    assert y.data[0, 0, 0, 0] == 60


@pytest.mark.parametrize("stride,pad,hw", [(1, 0, 6), (1, 1, 5), (2, 1, 7), (2, 0, 7), (3, 2, 8)])
def test_reference_matches_exact_fraction_oracle(rng, stride, pad, hw):
    # small integers keep every partial sum exact in float32
    x = rng.integers(-4, 5, size=(2, 3, hw, hw)).astype(np.float32)
    w = rng.integers(-3, 4, size=(4, 3, 3, 3)).astype(np.float32)
    b = rng.integers(-2, 3, size=4).astype(np.float32)
    got = conv2d_reference(x, DenseConvLayer(w, b), ConvSpec(3, 3, stride, pad)).data
    want = fraction_conv(x, w, b, stride, pad).astype(np.float64)
    np.testing.assert_array_equal(got, want)


def test_reference_close_to_fraction_oracle_on_real_values(rng):
    x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    got = conv2d_reference(x, DenseConvLayer(w, b), ConvSpec(3, 3, 1, 1)).data
    want = fraction_conv(x, w, b, 1, 1).astype(np.float64)
    assert relative_error(got, want) < 1e-6


def test_im2col_matches_reference_large_layer(rng):
    x = Tensor4D.random((1, 64, 56, 56), rng)
    layer = DenseConvLayer.random(64, 64, 3, 3, rng, bias=True)
    spec = ConvSpec(3, 3, 1, 1)
    assert relative_error(conv2d_im2col(x, layer, spec), conv2d_reference(x, layer, spec)) < 1e-5


def test_zero_input_gives_bias(rng):
    layer = DenseConvLayer.random(5, 3, 3, 3, rng, bias=True)
    y = conv2d_im2col(Tensor4D.zeros(1, 3, 6, 6), layer, ConvSpec(3, 3, 1, 1)).data
    np.testing.assert_array_equal(y, np.broadcast_to(layer.bias[None, :, None, None], y.shape))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 2), c=st.integers(1, 4), f=st.integers(1, 5),
       k=st.sampled_from([1, 3, 5]), stride=st.integers(1, 2), pad=st.integers(0, 2),
       seed=st.integers(0, 2**32 - 1))
def test_im2col_equals_reference_property(n, c, f, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    h = k + stride * rng.integers(0, 6) - 2 * pad
    if h < 1:
        h += 2 * pad
        pad = 0
    spec = ConvSpec(k, k, stride, pad)
    x = Tensor4D.random((n, c, int(h), int(h)), rng)
    layer = DenseConvLayer.random(f, c, k, k, rng, bias=True)
    assert relative_error(conv2d_im2col(x, layer, spec), conv2d_reference(x, layer, spec)) < 1e-5


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**32 - 1))
def test_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
    y = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
    layer = DenseConvLayer.random(4, 3, 3, 3, rng)
    spec = ConvSpec(3, 3, 1, 1)
    lhs = conv2d_reference(np.float32(a) * x + np.float32(b) * y, layer, spec).data
    rhs = a * conv2d_reference(x, layer, spec).data + b * conv2d_reference(y, layer, spec).data
    scale = np.linalg.norm(abs(a) * np.abs(conv2d_reference(x, layer, spec).data)
                           + abs(b) * np.abs(conv2d_reference(y, layer, spec).data)) + 1e-12
    assert np.linalg.norm(lhs - rhs) / scale < 1e-5


@pytest.mark.parametrize("dy,dx", [(0, 1), (1, 0), (2, 3), (1, 2)])
def test_shift_invariance(rng, dy, dx):
    # integer data keeps both sides exact, so the shifted output matches bit for bit
    big = rng.integers(-5, 6, size=(1, 2, 14, 14)).astype(np.float32)
    x0 = big[:, :, 3:13, 3:13]
    x1 = big[:, :, 3 - dy:13 - dy, 3 - dx:13 - dx]
    layer = DenseConvLayer(rng.integers(-3, 4, size=(3, 2, 3, 3)).astype(np.float32))
    spec = ConvSpec(3, 3, 1, 0)
    y0 = conv2d_reference(x0, layer, spec).data
    y1 = conv2d_reference(x1, layer, spec).data
    np.testing.assert_array_equal(y1[:, :, dy:, dx:], y0[:, :, :y0.shape[2] - dy, :y0.shape[3] - dx])


def test_mac_count_dense_and_pattern(rng):
    dense = DenseConvLayer.random(64, 64, 3, 3, rng)
    spec = ConvSpec(3, 3, 1, 1)
    assert mac_count(dense, spec, (1, 64, 56, 56)) == 115_605_504
    pruned = prune_layer(dense, extended_pattern_set(4), 1.0)
    assert mac_count(pruned, spec, (1, 64, 56, 56)) == 51_380_224
    assert Fraction(115_605_504, 51_380_224) == Fraction(9, 4)


def test_mac_count_no_retained_kernels(rng):
    pruned = prune_layer(DenseConvLayer.random(4, 4, 3, 3, rng), extended_pattern_set(4), 1.0)
    empty = type(pruned)(pruned.pattern_set, np.full((4, 4), 255, np.uint8), np.zeros(0, np.float32))
    assert mac_count(empty, ConvSpec(3, 3, 1, 1), (8, 8)) == 0


def test_errors(rng):
    layer = DenseConvLayer.random(2, 3, 3, 3, rng)
    with pytest.raises(ShapeError):
        conv2d_reference(np.zeros((1, 2, 5, 5), np.float32), layer, ConvSpec(3, 3, 1, 0))
    bad = np.zeros((1, 3, 5, 5), np.float32)
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(DataError):
        conv2d_reference(bad, layer, ConvSpec(3, 3, 1, 0))
    with pytest.raises(ShapeError):
        ConvSpec(3, 3, 2, 1).output_hw(20, 20)
    with pytest.raises(ShapeError):
        ConvSpec(3, 3, 0, 0)
