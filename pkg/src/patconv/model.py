"""Model graph, pattern-pruned conv layers and layerwise information extraction."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ShapeError, ValidationError
from .patterns import PatternSet
from .tensor import ConvSpec, DenseConvLayer

__all__ = [
    "PRUNED",
    "PrunedConvLayer",
    "Conv",
    "ReLU",
    "MaxPool",
    "Linear",
    "ModelGraph",
    "LayerInfo",
    "extract_layer_info",
    "to_dense",
    "validate_model",
]

PRUNED = 255


def _frozen(arr, dtype):
    out = np.array(arr, dtype=dtype, copy=True, order="C")
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class PrunedConvLayer:
    """Pattern + connectivity pruned 3x3 convolution.

    ``pattern_ids[f, c]`` is the pattern of kernel (f, c) or :data:`PRUNED`.
    ``compact_weights`` holds ``nnz`` values per retained kernel, kernels in
    filter-major / channel-minor order, values in the mask's row-major order.

    Only structure is checked here; ids out of range and non-finite weights
    are reported by :func:`validate_model`.
    """

    pattern_set: PatternSet
    pattern_ids: np.ndarray
    compact_weights: np.ndarray
    bias: np.ndarray = None
    balanced: bool = False

    def __post_init__(self):
        ids = _frozen(self.pattern_ids, np.uint8)
        if ids.ndim != 2:
            raise ShapeError(f"pattern_ids must be F x C, got shape {ids.shape}")
        w = _frozen(self.compact_weights, np.float32).ravel()
        w.flags.writeable = False
        expected = self.pattern_set.nnz * int(np.count_nonzero(ids != PRUNED))
        if w.size != expected:
            raise ShapeError(f"compact_weights has {w.size} values, expected "
                             f"{expected} (nnz x retained kernels)")
        bias = np.zeros(ids.shape[0], np.float32) if self.bias is None else self.bias
        bias = _frozen(bias, np.float32)
        if bias.shape != (ids.shape[0],):
            raise ShapeError(f"bias must have length {ids.shape[0]}, got {bias.shape}")
        object.__setattr__(self, "pattern_ids", ids)
        object.__setattr__(self, "compact_weights", w)
        object.__setattr__(self, "bias", bias)
        object.__setattr__(self, "balanced", bool(self.balanced))

    filters = property(lambda self: self.pattern_ids.shape[0])
    channels = property(lambda self: self.pattern_ids.shape[1])
    kernel_h = 3
    kernel_w = 3

    @property
    def nnz(self) -> int:
        return self.pattern_set.nnz

    @property
    def retained(self) -> np.ndarray:
        """F x C boolean connectivity map."""
        return self.pattern_ids != PRUNED

    @property
    def retained_kernels(self) -> int:
        return int(np.count_nonzero(self.pattern_ids != PRUNED))

    def default_spec(self, stride=1, padding=0) -> ConvSpec:
        return ConvSpec(3, 3, stride, padding)

    def weight_offsets(self) -> np.ndarray:
        """F x C start index into ``compact_weights`` (-1 for pruned kernels)."""
        keep = self.retained.ravel()
        offs = np.full(keep.size, -1, np.int64)
        offs[keep] = np.arange(int(keep.sum()), dtype=np.int64) * self.nnz
        return offs.reshape(self.pattern_ids.shape)

    def kernel(self, f, c) -> np.ndarray:
        """Dense 3x3 view of one kernel (zeros if pruned)."""
        out = np.zeros(9, np.float32)
        pid = int(self.pattern_ids[f, c])
        if pid != PRUNED:
            start = int(self.weight_offsets()[f, c])
            out[list(self.pattern_set[pid].flat_positions)] = \
                self.compact_weights[start:start + self.nnz]
        return out.reshape(3, 3)

    def with_weights(self, compact_weights, bias=None) -> "PrunedConvLayer":
        return replace(self, compact_weights=compact_weights,
                       bias=self.bias if bias is None else bias)


ConvWeights = Union[DenseConvLayer, PrunedConvLayer]


@dataclass(frozen=True, eq=False)
class Conv:
    name: str
    layer: ConvWeights
    spec: ConvSpec = None

    def __post_init__(self):
        if self.spec is None:
            object.__setattr__(self, "spec", self.layer.default_spec())
        if (self.spec.kernel_h, self.spec.kernel_w) != (self.layer.kernel_h, self.layer.kernel_w):
            raise ShapeError(f"{self.name}: ConvSpec kernel does not match layer kernel")

    @property
    def pruned(self) -> bool:
        return isinstance(self.layer, PrunedConvLayer)

    def out_shape(self, shape):
        c, h, w = shape
        if c != self.layer.channels:
            raise ShapeError(f"{self.name}: expects {self.layer.channels} channels, got {c}")
        ho, wo = self.spec.output_hw(h, w)
        return (self.layer.filters, ho, wo)


@dataclass(frozen=True)
class ReLU:
    name: str

    def out_shape(self, shape):
        return shape


@dataclass(frozen=True)
class MaxPool:
    name: str
    size: int = 2
    stride: int = 2

    def out_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"{self.name}: pooling needs a C x H x W input")
        c, h, w = shape
        if h < self.size or w < self.size:
            raise ShapeError(f"{self.name}: {h}x{w} input is smaller than the pool window")
        return (c, (h - self.size) // self.stride + 1, (w - self.size) // self.stride + 1)


@dataclass(frozen=True, eq=False)
class Linear:
    """Dense pass-through layer; flattens its input first."""

    name: str
    weight: np.ndarray
    bias: np.ndarray = None

    def __post_init__(self):
        w = _frozen(self.weight, np.float32)
        if w.ndim != 2:
            raise ShapeError(f"{self.name}: linear weight must be 2-D")
        b = np.zeros(w.shape[0], np.float32) if self.bias is None else self.bias
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", _frozen(b, np.float32))

    def out_shape(self, shape):
        n_in = int(np.prod(shape))
        if n_in != self.weight.shape[1]:
            raise ShapeError(f"{self.name}: expects {self.weight.shape[1]} inputs, got {n_in}")
        return (self.weight.shape[0],)


Node = Union[Conv, ReLU, MaxPool, Linear]


@dataclass(frozen=True, eq=False)
class ModelGraph:
    """Sequential network: one input, one output, layers applied in order."""

    input_shape: Tuple[int, int, int]
    layers: Tuple[Node, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        names = [n.name for n in self.layers]
        if len(set(names)) != len(names):
            raise ValidationError(f"layer names must be unique: {names}")
        self.shapes()

    def shapes(self) -> List[Tuple[int, ...]]:
        """Output shape (without batch) after every layer."""
        shape = self.input_shape
        out = []
        for node in self.layers:
            shape = node.out_shape(shape)
            out.append(shape)
        return out

    def input_shapes(self) -> List[Tuple[int, ...]]:
        return [self.input_shape] + self.shapes()[:-1]

    @property
    def output_shape(self):
        return self.shapes()[-1] if self.layers else self.input_shape

    def convs(self) -> List[Conv]:
        return [n for n in self.layers if isinstance(n, Conv)]

    def __getitem__(self, name) -> Node:
        for n in self.layers:
            if n.name == name:
                return n
        raise KeyError(name)

    def replace(self, name, node) -> "ModelGraph":
        return ModelGraph(self.input_shape, [node if n.name == name else n for n in self.layers])

    def with_conv_layers(self, layers: Dict[str, ConvWeights]) -> "ModelGraph":
        nodes = [Conv(n.name, layers[n.name], n.spec) if isinstance(n, Conv) and n.name in layers
                 else n for n in self.layers]
        return ModelGraph(self.input_shape, nodes)


@dataclass(frozen=True)
class LayerInfo:
    """Pattern and connectivity summary of one pruned layer.

    ``signatures[f]`` is the sorted tuple of pattern ids of filter f's retained
    kernels; ``connectivity[f]`` the ascending retained channels.
    ``filter_macs[f]`` counts multiply-adds per output position.
    """

    filters: int
    channels: int
    nnz: int
    histogram: Dict[int, int]
    signatures: Tuple[Tuple[int, ...], ...]
    connectivity: Tuple[Tuple[int, ...], ...]
    kernel_patterns: Tuple[Tuple[int, ...], ...]
    filter_macs: Tuple[int, ...]
    macs_per_position: int
    total_macs: Optional[int] = None


def extract_layer_info(layer: PrunedConvLayer, output_hw=None, batch: int = 1) -> LayerInfo:
    """Histogram, per-filter signatures, connectivity map and MAC totals.

    ``kernel_patterns[f]`` lists the pattern id of each retained kernel of
    filter f in channel order. ``total_macs`` is filled when ``output_hw``
    is given.
    """
    ids = layer.pattern_ids
    n_pat = len(layer.pattern_set)
    bad = (ids != PRUNED) & (ids >= n_pat)
    if bad.any():
        f, c = map(int, np.argwhere(bad)[0])
        raise ValidationError(f"kernel ({f}, {c}) has pattern id {int(ids[f, c])}, "
                              f"but the pattern set has {n_pat} entries")
    hist = Counter()
    sigs, conn, kpat, fmacs = [], [], [], []
    for f in range(layer.filters):
        row = ids[f]
        chans = np.flatnonzero(row != PRUNED)
        pats = tuple(int(p) for p in row[chans])
        hist.update(pats)
        conn.append(tuple(int(c) for c in chans))
        kpat.append(pats)
        sigs.append(tuple(sorted(pats)))
        fmacs.append(layer.nnz * len(pats))
    per_pos = sum(fmacs)
    total = None
    if output_hw is not None:
        total = batch * int(output_hw[0]) * int(output_hw[1]) * per_pos
    return LayerInfo(layer.filters, layer.channels, layer.nnz,
                     dict(sorted(hist.items())), tuple(sigs), tuple(conn), tuple(kpat),
                     tuple(fmacs), per_pos, total)


def to_dense(layer: ConvWeights) -> DenseConvLayer:
    """Scatter compact weights back into an F x C x 3 x 3 tensor (pruned kernels are zero)."""
    if isinstance(layer, DenseConvLayer):
        return layer
    ids = layer.pattern_ids.ravel()
    keep = np.flatnonzero(ids != PRUNED)
    pos = layer.pattern_set.positions()[ids[keep]]
    dense = np.zeros((ids.size, 9), np.float32)
    rows = np.repeat(keep, layer.nnz)
    dense[rows, pos.ravel()] = layer.compact_weights
    return DenseConvLayer(dense.reshape(layer.filters, layer.channels, 3, 3), layer.bias)


def _layer_violations(name, layer) -> List[str]:
    out = []
    if isinstance(layer, DenseConvLayer):
        return out
    ids = layer.pattern_ids
    n_pat = len(layer.pattern_set)
    bad = np.argwhere((ids != PRUNED) & (ids >= n_pat))
    for f, c in bad[:10]:
        out.append(f"{name}: filter {f} channel {c}: pattern id {ids[f, c]} >= set size {n_pat}")
    if len(bad) > 10:
        out.append(f"{name}: {len(bad) - 10} more out-of-range pattern ids")
    if layer.balanced:
        counts = (ids != PRUNED).sum(axis=1)
        if counts.size and counts.min() != counts.max():
            out.append(f"{name}: balanced flag set but retained kernels per filter range "
                       f"{int(counts.min())}..{int(counts.max())}")
    w = layer.compact_weights
    if not np.isfinite(w).all():
        offs = layer.weight_offsets()
        first = int(np.flatnonzero(~np.isfinite(w))[0])
        kernel_start = first - first % layer.nnz
        f, c = map(int, np.argwhere(offs == kernel_start)[0])
        n_bad = int((~np.isfinite(w)).sum())
        out.append(f"{name}: non-finite weight at filter {f} channel {c}"
                   + (f" ({n_bad} non-finite values in layer)" if n_bad > 1 else ""))
    if not np.isfinite(layer.bias).all():
        out.append(f"{name}: non-finite bias")
    return out


def validate_model(model: Union[ModelGraph, PrunedConvLayer]) -> List[str]:
    """Return every invariant violation found; an empty list means valid."""
    if isinstance(model, (PrunedConvLayer, DenseConvLayer)):
        return _layer_violations("layer", model)
    out = []
    try:
        model.shapes()
    except ShapeError as exc:
        out.append(f"shape: {exc}")
    for node in model.layers:
        if isinstance(node, Conv):
            out.extend(_layer_violations(node.name, node.layer))
        elif isinstance(node, Linear):
            if not (np.isfinite(node.weight).all() and np.isfinite(node.bias).all()):
                out.append(f"{node.name}: non-finite linear weights")
    return out
