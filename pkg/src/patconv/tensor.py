"""Dense tensors, reference/im2col convolution and MAC accounting.

Everything here is NCHW, row-major, 32-bit float. The reference convolution
is the oracle the sparse executors are checked against, so its summation
order is fixed: channel-major, then kernel row, then kernel column, with the
bias added last.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from .errors import DataError, ShapeError

__all__ = [
    "Tensor4D",
    "ConvSpec",
    "DenseConvLayer",
    "as_tensor",
    "conv2d_reference",
    "conv2d_im2col",
    "mac_count",
    "relative_error",
]


def _frozen_f32(values, name):
    arr = np.array(values, dtype=np.float32, copy=True, order="C")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Tensor4D:
    """Immutable float32 activation tensor with index order (n, c, h, w)."""

    data: np.ndarray

    def __post_init__(self):
        arr = _frozen_f32(self.data, "data")
        if arr.ndim != 4:
            raise ShapeError(f"Tensor4D needs 4 dims, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"all Tensor4D dims must be >= 1, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise DataError("Tensor4D contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.data.shape

    n = property(lambda self: self.data.shape[0])
    c = property(lambda self: self.data.shape[1])
    h = property(lambda self: self.data.shape[2])
    w = property(lambda self: self.data.shape[3])

    @classmethod
    def wrap(cls, arr: np.ndarray) -> "Tensor4D":
        """Adopt a freshly computed float32 array (or view) without copying or scanning it."""
        if arr.dtype != np.float32 or arr.ndim != 4 or min(arr.shape) < 1:
            return cls(arr)
        arr.flags.writeable = False
        obj = object.__new__(cls)
        object.__setattr__(obj, "data", arr)
        return obj

    @classmethod
    def zeros(cls, n, c, h, w):
        return cls(np.zeros((n, c, h, w), np.float32))

    @classmethod
    def random(cls, shape, rng=None):
        rng = np.random.default_rng(rng)
        return cls(rng.standard_normal(shape).astype(np.float32))

    def numpy(self) -> np.ndarray:
        return self.data

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self):
        return f"Tensor4D(shape={self.shape})"


TensorLike = Union[Tensor4D, np.ndarray]


def as_tensor(x: TensorLike) -> Tensor4D:
    """Coerce an array-like to a Tensor4D, raising DataError on NaN/inf."""
    if isinstance(x, Tensor4D):
        return x
    return Tensor4D(np.asarray(x))


@dataclass(frozen=True)
class ConvSpec:
    """Stride, symmetric zero padding and kernel size of a 2-D convolution."""

    kernel_h: int = 3
    kernel_w: int = 3
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        for name in ("kernel_h", "kernel_w", "stride", "padding"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                raise ShapeError(f"ConvSpec.{name} must be an integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ShapeError("kernel dims must be positive")
        if self.stride < 1:
            raise ShapeError("stride must be positive")
        if self.padding < 0:
            raise ShapeError("padding must be non-negative")

    def output_hw(self, h: int, w: int) -> Tuple[int, int]:
        """Output spatial dims; the division must be exact and the result positive."""
        out = []
        for size, k in ((h, self.kernel_h), (w, self.kernel_w)):
            span = size + 2 * self.padding - k
            if span < 0 or span % self.stride:
                raise ShapeError(
                    f"input extent {size} with kernel {k}, stride {self.stride}, "
                    f"padding {self.padding} does not give an integral output size"
                )
            out.append(span // self.stride + 1)
        return out[0], out[1]

    def to_dict(self):
        return {"kernel_h": self.kernel_h, "kernel_w": self.kernel_w,
                "stride": self.stride, "padding": self.padding}


@dataclass(frozen=True, eq=False)
class DenseConvLayer:
    """Dense F x C x kh x kw weights plus a length-F bias."""

    weights: np.ndarray
    bias: np.ndarray = None

    def __post_init__(self):
        w = _frozen_f32(self.weights, "weights")
        if w.ndim != 4:
            raise ShapeError(f"weights must be F x C x kh x kw, got shape {w.shape}")
        if self.bias is None:
            b = np.zeros(w.shape[0], np.float32)
            b.flags.writeable = False
        else:
            b = _frozen_f32(self.bias, "bias")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias must have length {w.shape[0]}, got shape {b.shape}")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise DataError("DenseConvLayer contains non-finite values")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    filters = property(lambda self: self.weights.shape[0])
    channels = property(lambda self: self.weights.shape[1])
    kernel_h = property(lambda self: self.weights.shape[2])
    kernel_w = property(lambda self: self.weights.shape[3])

    def default_spec(self, stride=1, padding=0) -> ConvSpec:
        return ConvSpec(self.kernel_h, self.kernel_w, stride, padding)

    @classmethod
    def random(cls, filters, channels, kh=3, kw=3, rng=None, bias=False):
        rng = np.random.default_rng(rng)
        scale = np.sqrt(2.0 / (channels * kh * kw))
        w = (rng.standard_normal((filters, channels, kh, kw)) * scale).astype(np.float32)
        b = rng.standard_normal(filters).astype(np.float32) * 0.1 if bias else None
        return cls(w, b)


def _check_conv(x, layer, spec):
    x = as_tensor(x)
    if spec is None:
        spec = layer.default_spec()
    if (spec.kernel_h, spec.kernel_w) != (layer.kernel_h, layer.kernel_w):
        raise ShapeError(
            f"spec kernel {spec.kernel_h}x{spec.kernel_w} does not match layer "
            f"kernel {layer.kernel_h}x{layer.kernel_w}"
        )
    if x.c != layer.channels:
        raise ShapeError(f"input has {x.c} channels, layer expects {layer.channels}")
    ho, wo = spec.output_hw(x.h, x.w)
    return x, spec, ho, wo


def _pad(data, padding, dtype):
    if padding == 0:
        return data.astype(dtype, copy=False)
    p = padding
    return np.pad(data.astype(dtype, copy=False), ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d_reference(x: TensorLike, layer: DenseConvLayer, spec: ConvSpec = None) -> Tensor4D:
    """Direct cross-correlation ``g(y, x) = sum_c sum_k sum_l f(y+k, x+l) h(k, l) + b``.

    Accumulates in float64 and rounds once to float32. Summation is
    channel-major, then kernel row, then kernel column, for every output.
    """
    x, spec, ho, wo = _check_conv(x, layer, spec)
    xp = _pad(x.data, spec.padding, np.float64)
    w = layer.weights.astype(np.float64)
    s = spec.stride
    out = np.zeros((x.n, layer.filters, ho, wo), np.float64)
    for c in range(layer.channels):
        for ky in range(layer.kernel_h):
            for kx in range(layer.kernel_w):
                window = xp[:, c, ky:ky + s * (ho - 1) + 1:s, kx:kx + s * (wo - 1) + 1:s]
                out += w[None, :, c, ky, kx, None, None] * window[:, None]
    out += layer.bias.astype(np.float64)[None, :, None, None]
    return Tensor4D(out.astype(np.float32))


def conv2d_im2col(x: TensorLike, layer: DenseConvLayer, spec: ConvSpec = None) -> Tensor4D:
    """Lower the convolution to one float32 GEMM over an im2col buffer.

    The column buffer has shape (C*kh*kw, N*Ho*Wo) and is filled with one
    strided slice copy per (kernel row, kernel column).
    """
    x, spec, ho, wo = _check_conv(x, layer, spec)
    n, c = x.n, x.c
    kh, kw, s = layer.kernel_h, layer.kernel_w, spec.stride
    xp = _pad(x.data, spec.padding, np.float32)
    cols = np.empty((c, kh, kw, n, ho, wo), np.float32)
    src = xp.transpose(1, 0, 2, 3)
    for ky in range(kh):
        for kx in range(kw):
            cols[:, ky, kx] = src[:, :, ky:ky + s * (ho - 1) + 1:s, kx:kx + s * (wo - 1) + 1:s]
    wmat = layer.weights.reshape(layer.filters, c * kh * kw)
    out = wmat @ cols.reshape(c * kh * kw, n * ho * wo)
    out = out.reshape(layer.filters, n, ho, wo).transpose(1, 0, 2, 3)
    out += layer.bias[None, :, None, None]
    return Tensor4D(out)


def _input_dims(input_dims):
    if isinstance(input_dims, Tensor4D):
        return input_dims.shape
    dims = tuple(int(d) for d in input_dims)
    if len(dims) == 2:
        return (1, None) + dims
    if len(dims) == 3:
        return (1,) + dims
    if len(dims) == 4:
        return dims
    raise ShapeError(f"input dims must be (h, w), (c, h, w) or (n, c, h, w), got {input_dims}")


def mac_count(layer, spec: ConvSpec, input_dims) -> int:
    """Exact multiply-accumulate count of one convolution.

    Dense layers cost ``N*F*C*Ho*Wo*kh*kw``. Pattern-pruned layers cost
    ``N*Ho*Wo*nnz*retained_kernels``. ``input_dims`` may be (h, w),
    (c, h, w), (n, c, h, w) or a Tensor4D.
    """
    n, c, h, w = _input_dims(input_dims)
    if c is not None and c != layer.channels:
        raise ShapeError(f"input has {c} channels, layer expects {layer.channels}")
    if (spec.kernel_h, spec.kernel_w) != (layer.kernel_h, layer.kernel_w):
        raise ShapeError("ConvSpec kernel does not match layer kernel")
    ho, wo = spec.output_hw(h, w)
    if isinstance(layer, DenseConvLayer):
        per_pixel = layer.filters * layer.channels * layer.kernel_h * layer.kernel_w
    else:
        per_pixel = layer.nnz * layer.retained_kernels
    return int(n) * int(ho) * int(wo) * int(per_pixel)


def relative_error(actual, expected) -> float:
    """Norm-wise relative error ``max|a - e| / max|e|`` (absolute when ``e`` is all zero)."""
    a = np.asarray(actual, np.float64)
    e = np.asarray(expected, np.float64)
    if a.shape != e.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {e.shape}")
    if a.size == 0:
        return 0.0
    diff = float(np.max(np.abs(a - e)))
    scale = float(np.max(np.abs(e)))
    return diff / scale if scale > 0 else diff
