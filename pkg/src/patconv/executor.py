"""Multithreaded execution of compiled plans, plus the CSR sparse baseline.

Workers are plain Python threads running ``nogil`` compiled loops over
disjoint sets of output filters; the input, weights and plan are shared
read-only. Each filter's kernels are always summed in the plan's order, so
results do not depend on the number of workers.
"""
from __future__ import annotations

import os
import weakref
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .compiler import ExecutionPlan, layer_fingerprint, permute_channels
from .errors import PlanMismatchError, ShapeError, ValidationError
from .model import PRUNED, Conv, Linear, MaxPool, ModelGraph, PrunedConvLayer, ReLU, to_dense
from .tensor import (ConvSpec, DenseConvLayer, Tensor4D, as_tensor, conv2d_im2col,
                     conv2d_reference)

__all__ = [
    "ExecStats",
    "CsrSparseLayer",
    "execute_plan",
    "csr_execute",
    "run_network",
    "reference_network",
    "default_threads",
    "relu",
    "max_pool",
]


CACHE_BYTES = 2 * 1024 * 1024


def default_threads(threads=None) -> int:
    """Explicit value, else ``PCONV_THREADS``, else 1."""
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("PCONV_THREADS")
    if not env:
        return 1
    try:
        return max(1, int(env))
    except ValueError:
        raise ValidationError(f"PCONV_THREADS must be an integer, got {env!r}") from None


@dataclass(frozen=True)
class ExecStats:
    """Instrumented multiply-add counts, one entry per worker."""

    worker_macs: Tuple[int, ...]

    @property
    def total_macs(self) -> int:
        return int(sum(self.worker_macs))

    @property
    def spread(self) -> int:
        return int(max(self.worker_macs) - min(self.worker_macs)) if self.worker_macs else 0


def _padded(x: np.ndarray, padding: int, dtype):
    """Zero halo of ``padding`` plus one spare bottom row for the flat tap trick."""
    n, c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    buf = np.zeros((n, c, hp + 1, wp), dtype)
    buf[:, :, padding:padding + h, padding:padding + w] = x
    return buf, hp, wp


def _run_workers(fn, jobs):
    if len(jobs) == 1:
        return [fn(*jobs[0])]
    with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
        return list(pool.map(lambda a: fn(*a), jobs))


class _PlanArrays:
    """Flattened kernel schedule of a plan, in compiled filter order.

    For stride 1 each filter's kernel sequence is additionally split by
    channel block (stable, so the plan's pattern grouping survives inside a
    block); ``kbptr[f, b]`` indexes the start of block b of filter f.
    """

    def __init__(self, plan: ExecutionPlan, layer: PrunedConvLayer, dtype):
        order = np.asarray(plan.order, np.int64)
        counts = np.array([len(k) for k in plan.kernel_orders], np.int64)
        kptr = np.zeros(plan.filters + 1, np.int64)
        kptr[1:] = np.cumsum(counts)
        chans = np.fromiter((c for k in plan.kernel_orders for c in k), np.int64,
                            count=int(kptr[-1]))
        fpos = np.repeat(np.arange(plan.filters), counts)
        band = min(_kernels.BAND, plan.output_hw[0] * plan.row_stride)
        block = block_channels(band, plan.row_stride, np.dtype(dtype).itemsize)
        n_blocks = -(-plan.channels // block)
        blk = chans // block
        perm = np.lexsort((np.arange(chans.size), blk, fpos))
        chans, blk = chans[perm], blk[perm]
        self.kbptr = (kptr[:-1, None] + np.stack(
            [np.bincount(fpos, blk < b, plan.filters) for b in range(n_blocks + 1)], axis=1)
        ).astype(np.int64)
        self.kptr = kptr
        filt = order[fpos]
        self.kchan = chans
        self.kpid = layer.pattern_ids[filt, chans].astype(np.int64)
        self.kwoff = layer.weight_offsets()[filt, chans]
        if (self.kpid == PRUNED).any() or (self.kwoff < 0).any():
            raise PlanMismatchError("plan visits a kernel that the layer has pruned")
        self.weights = layer.compact_weights.astype(dtype)
        self.bias = layer.bias[order].astype(dtype)
        self.tmpl = np.array([t.offsets for t in plan.templates], np.int64).reshape(
            len(plan.templates), plan.nnz)
        self.units = []
        for part in plan.partition:
            lo = np.array([plan.units[u].start for u in part], np.int64)
            hi = np.array([plan.units[u].stop for u in part], np.int64)
            self.units.append((lo, hi))


def block_channels(band: int, row_stride: int, itemsize: int = 4) -> int:
    """Channels per cache block: their input bands together stay under CACHE_BYTES."""
    per_channel = (band + 2 * row_stride + 2) * itemsize
    return max(1, CACHE_BYTES // per_channel)


_PREPARED = weakref.WeakKeyDictionary()


def _prepared(plan: ExecutionPlan, layer: PrunedConvLayer, dtype) -> _PlanArrays:
    """Flattened schedule, cached per (plan, layer object, dtype)."""
    entry = _PREPARED.get(plan)
    if entry is not None and entry[0]() is layer and entry[1] == dtype:
        return entry[2]
    arrs = _PlanArrays(plan, layer, dtype)
    _PREPARED[plan] = (weakref.ref(layer), dtype, arrs)
    return arrs


def _check_plan(plan: ExecutionPlan, layer: PrunedConvLayer, x: Tensor4D):
    if x.c != plan.channels or (x.h, x.w) != tuple(plan.input_hw):
        raise ShapeError(f"plan {plan.name} expects input (*, {plan.channels}, "
                         f"{plan.input_hw[0]}, {plan.input_hw[1]}), got {x.shape}")
    if (layer.filters, layer.channels) != (plan.filters, plan.channels):
        raise PlanMismatchError(f"plan {plan.name} is for a {plan.filters}x{plan.channels} "
                                f"layer, got {layer.filters}x{layer.channels}")
    entry = _PREPARED.get(plan)
    if entry is not None and entry[0]() is layer:
        return
    fp = layer_fingerprint(layer, plan.spec, plan.input_hw)
    if fp != plan.fingerprint:
        raise PlanMismatchError(f"plan {plan.name} fingerprint {plan.fingerprint} does not "
                                f"match layer fingerprint {fp}")


def execute_plan(plan: ExecutionPlan, layer: PrunedConvLayer, x, *, logical_order: bool = True,
                 accumulate=np.float32, return_stats: bool = False):
    """Run one compiled layer.

    With ``logical_order`` the output channels follow the layer's filter
    order; otherwise they are left in the plan's reordered order (what the
    next, permutation-propagated layer expects). ``accumulate=np.float64``
    selects 64-bit accumulation.
    """
    x = as_tensor(x)
    _check_plan(plan, layer, x)
    dtype = np.dtype(accumulate)
    arrs = _prepared(plan, layer, dtype)
    s = plan.spec
    ho, wo = s.output_hw(x.h, x.w)
    buf, hp, wp = _padded(x.data, s.padding, dtype)
    xpf = buf.ravel()
    plane = (hp + 1) * wp
    batch_stride = plane * x.c
    orow = np.asarray(plan.order if logical_order else range(plan.filters), np.int64)
    if s.stride == 1:
        out = np.zeros((x.n, plan.filters, ho * wp), dtype)
        jobs = [(xpf, out, batch_stride, plane, wp, wo, lo, hi, arrs.kbptr, arrs.kchan,
                 arrs.kpid, arrs.kwoff, arrs.weights, arrs.tmpl, arrs.bias, orow, _kernels.BAND)
                for lo, hi in arrs.units]
        macs = _run_workers(_kernels.pattern_flat, jobs)
        y = out.reshape(x.n, plan.filters, ho, wp)[:, :, :, :wo]
    else:
        out = np.zeros((x.n, plan.filters, ho * wo), dtype)
        jobs = [(xpf, out, batch_stride, plane, wp, s.stride, ho, wo, lo, hi, arrs.kptr,
                 arrs.kchan, arrs.kpid, arrs.kwoff, arrs.weights, arrs.tmpl, arrs.bias, orow)
                for lo, hi in arrs.units]
        macs = _run_workers(_kernels.pattern_strided, jobs)
        y = out.reshape(x.n, plan.filters, ho, wo)
    result = Tensor4D.wrap(y.astype(np.float32, copy=False))
    if return_stats:
        return result, ExecStats(tuple(int(m) for m in macs))
    return result


@dataclass(frozen=True, eq=False)
class CsrSparseLayer:
    """Filter-major compressed sparse rows over the flattened C*kh*kw weight axis."""

    filters: int
    channels: int
    kernel_h: int
    kernel_w: int
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        ip = np.asarray(self.indptr, np.int64)
        ix = np.asarray(self.indices, np.int64)
        vals = np.asarray(self.values, np.float32)
        if ip.shape != (self.filters + 1,) or ip[0] != 0 or ip[-1] != ix.size or (np.diff(ip) < 0).any():
            raise ShapeError("malformed CSR row pointer")
        if ix.size != vals.size:
            raise ShapeError("CSR indices and values differ in length")
        width = self.channels * self.kernel_h * self.kernel_w
        if ix.size and (ix.min() < 0 or ix.max() >= width):
            raise ShapeError("CSR column index out of range")
        for f in range(self.filters):
            row = ix[ip[f]:ip[f + 1]]
            if row.size > 1 and (np.diff(row) <= 0).any():
                raise ShapeError(f"CSR indices of filter {f} are not strictly increasing")
        if (vals == 0).any():
            raise ShapeError("CSR values must be non-zero")
        for name, arr in (("indptr", ip), ("indices", ix), ("values", vals)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        b = np.asarray(self.bias, np.float32).copy()
        b.flags.writeable = False
        object.__setattr__(self, "bias", b)

    @classmethod
    def from_dense(cls, layer) -> "CsrSparseLayer":
        layer = to_dense(layer)
        flat = layer.weights.reshape(layer.filters, -1)
        rows, cols = np.nonzero(flat)
        indptr = np.zeros(layer.filters + 1, np.int64)
        np.add.at(indptr, rows + 1, 1)
        return cls(layer.filters, layer.channels, layer.kernel_h, layer.kernel_w,
                   np.cumsum(indptr), cols, flat[rows, cols], layer.bias)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def to_dense(self) -> DenseConvLayer:
        flat = np.zeros((self.filters, self.channels * self.kernel_h * self.kernel_w), np.float32)
        rows = np.repeat(np.arange(self.filters), np.diff(self.indptr))
        flat[rows, self.indices] = self.values
        return DenseConvLayer(flat.reshape(self.filters, self.channels, self.kernel_h,
                                           self.kernel_w), self.bias)


def csr_execute(layer: CsrSparseLayer, spec: ConvSpec, x, *, threads: int = 1,
                return_stats: bool = False):
    """Index-chasing sparse convolution: every stored weight is decoded to
    (channel, row, col) at run time and applied as one shifted AXPY.
    Filters are split into ``threads`` equal contiguous blocks."""
    x = as_tensor(x)
    if x.c != layer.channels:
        raise ShapeError(f"input has {x.c} channels, layer expects {layer.channels}")
    if (spec.kernel_h, spec.kernel_w) != (layer.kernel_h, layer.kernel_w):
        raise ShapeError("ConvSpec kernel does not match layer kernel")
    ho, wo = spec.output_hw(x.h, x.w)
    threads = max(1, min(int(threads), layer.filters))
    bounds = np.linspace(0, layer.filters, threads + 1).round().astype(int)
    buf, hp, wp = _padded(x.data, spec.padding, np.float32)
    xpf = buf.ravel()
    plane = (hp + 1) * wp
    batch_stride = plane * x.c
    if spec.stride == 1:
        out = np.zeros((x.n, layer.filters, ho * wp), np.float32)
        jobs = [(xpf, out, batch_stride, plane, wp, wo, int(a), int(b), layer.indptr,
                 layer.indices, layer.values, layer.bias, layer.kernel_h, layer.kernel_w,
                 _kernels.BAND)
                for a, b in zip(bounds[:-1], bounds[1:])]
        macs = _run_workers(_kernels.csr_flat, jobs)
        y = out.reshape(x.n, layer.filters, ho, wp)[:, :, :, :wo]
    else:
        out = np.zeros((x.n, layer.filters, ho * wo), np.float32)
        jobs = [(xpf, out, batch_stride, plane, wp, spec.stride, ho, wo, int(a), int(b),
                 layer.indptr, layer.indices, layer.values, layer.bias, layer.kernel_h,
                 layer.kernel_w)
                for a, b in zip(bounds[:-1], bounds[1:])]
        macs = _run_workers(_kernels.csr_strided, jobs)
        y = out.reshape(x.n, layer.filters, ho, wo)
    result = Tensor4D.wrap(y)
    if return_stats:
        return result, ExecStats(tuple(int(m) for m in macs))
    return result


def relu(y: np.ndarray) -> np.ndarray:
    return np.maximum(y, 0, dtype=np.float32)


def max_pool(y: np.ndarray, size: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(y, (size, size), axis=(2, 3))
    return np.ascontiguousarray(win[:, :, ::stride, ::stride].max(axis=(-2, -1)))


def _linear(y: np.ndarray, node: Linear) -> np.ndarray:
    flat = y.reshape(y.shape[0], -1)
    return (flat @ node.weight.T + node.bias).astype(np.float32)


def run_network(model: ModelGraph, plans: Sequence[Optional[ExecutionPlan]], x) -> np.ndarray:
    """Execute a whole model with compiled plans (one per conv layer, ``None`` for dense ones).

    Activations stay in each plan's reordered channel order while only
    channel-wise layers follow; they are put back in logical order before a
    dense conv, a linear layer, or the network output.
    """
    convs = model.convs()
    if len(plans) != len(convs):
        raise PlanMismatchError(f"model has {len(convs)} conv layers but {len(plans)} plans were given")
    y = np.asarray(as_tensor(x).data, np.float32)
    expected = tuple(model.input_shape)
    if tuple(y.shape[1:]) != expected:
        raise ShapeError(f"model expects input (*, {expected}), got {y.shape}")
    perm = None
    ci = 0

    def logical(arr):
        return arr if perm is None else arr[:, list(perm)]

    for node in model.layers:
        if isinstance(node, Conv):
            plan = plans[ci]
            ci += 1
            if isinstance(node.layer, PrunedConvLayer):
                if plan is None:
                    raise PlanMismatchError(f"no plan for pruned layer {node.name}")
                layer = node.layer if perm is None else permute_channels(node.layer, perm)
                y = execute_plan(plan, layer, y, logical_order=False).data
                perm = plan.permutation
            else:
                if plan is not None:
                    raise PlanMismatchError(f"dense layer {node.name} was given a plan")
                y = conv2d_im2col(logical(y), node.layer, node.spec).data
                perm = None
        elif isinstance(node, ReLU):
            y = relu(y)
        elif isinstance(node, MaxPool):
            y = max_pool(y, node.size, node.stride)
        elif isinstance(node, Linear):
            y = _linear(logical(y), node)
            perm = None
    return logical(y) if y.ndim == 4 else y


def reference_network(model: ModelGraph, x) -> np.ndarray:
    """Layer-by-layer oracle: reference convolution on dense (scattered) weights."""
    y = np.asarray(as_tensor(x).data, np.float32)
    for node in model.layers:
        if isinstance(node, Conv):
            y = conv2d_reference(y, to_dense(node.layer), node.spec).data
        elif isinstance(node, ReLU):
            y = relu(y)
        elif isinstance(node, MaxPool):
            y = max_pool(y, node.size, node.stride)
        elif isinstance(node, Linear):
            y = _linear(y, node)
    return y
