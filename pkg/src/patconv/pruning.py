"""Pattern projection, connectivity pruning and compression accounting."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .errors import DomainError, ShapeError, ValidationError
from .model import PRUNED, Conv, ModelGraph, PrunedConvLayer, to_dense
from .patterns import PatternSet, canonical_scp_set, extended_pattern_set
from .tensor import DenseConvLayer, mac_count

__all__ = [
    "PruneConfig",
    "CompressionReport",
    "LayerCompression",
    "project_kernel",
    "project_kernels",
    "pattern_prune_layer",
    "connectivity_prune",
    "retained_count",
    "apply_connectivity",
    "prune_layer",
    "magnitude_prune",
    "compression_stats",
    "pattern_set_for",
]


def project_kernels(kernels, pset: PatternSet) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised Euclidean projection of many 3x3 kernels onto the pattern set.

    Each kernel gets the mask keeping the largest sum of squared weights, the
    lowest pattern id winning ties. Returns (ids, masked kernels).
    """
    k = np.asarray(kernels)
    if k.shape[-2:] != (3, 3):
        raise ShapeError(f"pattern projection needs 3x3 kernels, got shape {k.shape}")
    flat = k.reshape(-1, 9)
    sq = flat.astype(np.float64) ** 2
    pos = pset.positions()
    scores = np.zeros((flat.shape[0], len(pset)), np.float64)
    for t in range(pset.nnz):
        scores += sq[:, pos[:, t]]
    ids = np.argmax(scores, axis=1)
    # summation order differs per mask, so near-ties are rescored exactly
    best = scores[np.arange(len(ids)), ids]
    close = scores >= (best * (1 - 1e-12))[:, None]
    for row in np.flatnonzero((close.sum(axis=1) > 1) & (best > 0)):
        vals = [float(v) for v in flat[row]]
        exact = [math.fsum(vals[i] ** 2 for i in pos[p]) if close[row, p] else -1.0
                 for p in range(len(pset))]
        ids[row] = exact.index(max(exact))
    mask = pset.matrix()[ids].astype(k.dtype if k.dtype.kind == "f" else np.float32)
    masked = (flat * mask).reshape(k.shape)
    return ids.astype(np.uint8).reshape(k.shape[:-2]), masked


def project_kernel(kernel, pset: PatternSet) -> Tuple[int, np.ndarray]:
    """Project one 3x3 kernel; returns (pattern id, mask * kernel)."""
    ids, masked = project_kernels(np.asarray(kernel)[None], pset)
    return int(ids[0]), masked[0]


def _compact(weights_flat, ids_flat, pset):
    keep = np.flatnonzero(ids_flat != PRUNED)
    pos = pset.positions()[ids_flat[keep]]
    return weights_flat[keep[:, None], pos].ravel()


def pattern_prune_layer(layer: DenseConvLayer, pset: PatternSet) -> Tuple[PrunedConvLayer, np.ndarray]:
    """Project every kernel of a dense 3x3 layer; returns (pruned layer, F x C ids)."""
    if isinstance(layer, PrunedConvLayer):
        layer = to_dense(layer)
    if (layer.kernel_h, layer.kernel_w) != (3, 3):
        raise ShapeError(f"pattern pruning supports 3x3 kernels only, got "
                         f"{layer.kernel_h}x{layer.kernel_w}")
    ids, _ = project_kernels(layer.weights, pset)
    flat = layer.weights.reshape(-1, 9)
    compact = _compact(flat, ids.ravel(), pset)
    return PrunedConvLayer(pset, ids, compact, layer.bias), ids


def retained_count(channels: int, keep_ratio: float) -> int:
    """Kernels kept per filter: ``round(channels * keep_ratio)``, halves rounded up."""
    return int(np.floor(channels * keep_ratio + 0.5))


def _kernel_norms(layer) -> np.ndarray:
    if isinstance(layer, PrunedConvLayer):
        norms = np.zeros(layer.pattern_ids.shape, np.float64)
        if layer.retained_kernels:
            k = layer.compact_weights.reshape(-1, layer.nnz).astype(np.float64)
            norms[layer.retained] = np.sqrt((k ** 2).sum(axis=1))
        return norms
    w = np.asarray(layer.weights, np.float64)
    return np.sqrt((w.reshape(w.shape[0], w.shape[1], -1) ** 2).sum(axis=2))


def connectivity_prune(layer, keep_ratio: float, balanced: bool = True) -> np.ndarray:
    """Choose the kernels to keep by L2 norm; returns an F x C boolean map.

    Balanced mode keeps ``round(C * keep_ratio)`` kernels in every filter.
    Unbalanced mode keeps ``round(F * C * keep_ratio)`` kernels layer-wide.
    Ties keep the lower (flattened) index. Already pruned kernels have norm 0
    and are only kept if nothing else is left.
    """
    if not 0 < keep_ratio <= 1:
        raise DomainError(f"keep_ratio must lie in (0, 1], got {keep_ratio}")
    norms = _kernel_norms(layer)
    f, c = norms.shape
    keep = np.zeros((f, c), bool)
    if balanced:
        n_keep = retained_count(c, keep_ratio)
        if n_keep < 1:
            raise DomainError(f"keep_ratio {keep_ratio} keeps no kernel of {c} channels")
        order = np.argsort(-norms, axis=1, kind="stable")[:, :n_keep]
        np.put_along_axis(keep, order, True, axis=1)
    else:
        n_keep = retained_count(f * c, keep_ratio)
        order = np.argsort(-norms.ravel(), kind="stable")[:n_keep]
        keep.ravel()[order] = True
    return keep


def apply_connectivity(layer: PrunedConvLayer, keep: np.ndarray, balanced: bool = None) -> PrunedConvLayer:
    """Mark kernels outside ``keep`` as pruned and drop their compact weights."""
    keep = np.asarray(keep, bool)
    if keep.shape != layer.pattern_ids.shape:
        raise ShapeError(f"connectivity map shape {keep.shape} != {layer.pattern_ids.shape}")
    old_keep = layer.retained.ravel()
    new_ids = np.where(keep, layer.pattern_ids, PRUNED).astype(np.uint8)
    survivors = keep.ravel()[old_keep]
    w = layer.compact_weights.reshape(-1, layer.nnz)[survivors].ravel()
    if balanced is None:
        counts = (new_ids != PRUNED).sum(axis=1)
        balanced = bool(counts.size and counts.min() == counts.max())
    return PrunedConvLayer(layer.pattern_set, new_ids, w, layer.bias, balanced)


def prune_layer(layer: DenseConvLayer, pset: PatternSet, keep_ratio: float = 1.0,
                balanced: bool = True) -> PrunedConvLayer:
    """Pattern projection followed by connectivity pruning of the projected kernels."""
    pruned, _ = pattern_prune_layer(layer, pset)
    keep = connectivity_prune(pruned, keep_ratio, balanced)
    return apply_connectivity(pruned, keep, balanced=balanced)


@dataclass
class PruneConfig:
    """Pruning hyper-parameters.

    ``pattern_count`` is the size of the pattern library (4, 8 or 12 by
    default); every pattern keeps 4 of the 9 weights. ``layer_keep_ratios``
    overrides ``keep_ratio`` per conv layer name; ``skip_layers`` are left
    dense.
    """

    pattern_count: int = 4
    keep_ratio: float = 1.0
    balanced: bool = True
    method: str = "magnitude"
    rho: float = 1e-3
    rounds: int = 3
    epochs_per_round: int = 2
    lr: float = 0.01
    momentum: float = 0.9
    finetune_epochs: int = 3
    batch_size: int = 64
    seed: int = 0
    layer_keep_ratios: Dict[str, float] = field(default_factory=dict)
    skip_layers: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.method not in ("magnitude", "admm"):
            raise ValidationError(f"unknown pruning method {self.method!r}")
        if not 4 <= int(self.pattern_count) <= 126:
            raise ValidationError(f"pattern_count must be in [4, 126], got {self.pattern_count}")
        for name, r in [("keep_ratio", self.keep_ratio), *self.layer_keep_ratios.items()]:
            if not 0 < float(r) <= 1:
                raise DomainError(f"keep ratio for {name} must lie in (0, 1], got {r}")
        if self.rho < 0 or self.rounds < 0 or self.epochs_per_round < 0 or self.finetune_epochs < 0:
            raise ValidationError("rho, rounds and epoch counts must be non-negative")

    def keep_for(self, name) -> float:
        return float(self.layer_keep_ratios.get(name, self.keep_ratio))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown PruneConfig keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        """Read a JSON config file."""
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_file(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def pattern_set_for(config: PruneConfig) -> PatternSet:
    if config.pattern_count == 4:
        return canonical_scp_set()
    return extended_pattern_set(config.pattern_count)


def _prunable(node, config):
    return (isinstance(node, Conv) and node.name not in config.skip_layers
            and (node.layer.kernel_h, node.layer.kernel_w) == (3, 3))


def magnitude_prune(model: ModelGraph, config: PruneConfig, pset: PatternSet = None) -> ModelGraph:
    """One-shot projection of every prunable conv layer (no retraining)."""
    pset = pset or pattern_set_for(config)
    new = {}
    for node in model.convs():
        if _prunable(node, config):
            new[node.name] = prune_layer(to_dense(node.layer), pset,
                                         config.keep_for(node.name), config.balanced)
    return model.with_conv_layers(new)


@dataclass(frozen=True)
class LayerCompression:
    name: str
    dense_macs: int
    pattern_macs: int
    final_macs: int
    dense_weights: int
    final_weights: int

    @property
    def pattern_factor(self) -> Fraction:
        return Fraction(self.dense_macs, self.pattern_macs) if self.pattern_macs else Fraction(1)

    @property
    def connectivity_factor(self) -> Fraction:
        return Fraction(self.pattern_macs, self.final_macs) if self.final_macs else Fraction(1)


@dataclass(frozen=True)
class CompressionReport:
    """MAC-based compression factors, exact rationals.

    ``pattern_factor`` = dense MACs / MACs with every kernel kept but masked;
    ``connectivity_factor`` = that count / MACs after connectivity pruning.
    Their product is ``combined_factor``. Both factors are reported
    separately rather than assuming how published figures compose.
    """

    pattern_factor: Fraction
    connectivity_factor: Fraction
    combined_factor: Fraction
    dense_weights: int
    final_weights: int
    dense_macs: int
    final_macs: int
    layers: Tuple[LayerCompression, ...] = ()

    def summary(self) -> str:
        lines = [f"pattern {float(self.pattern_factor):.4g}x, connectivity "
                 f"{float(self.connectivity_factor):.4g}x, combined "
                 f"{float(self.combined_factor):.4g}x",
                 f"conv weights {self.dense_weights} -> {self.final_weights}, "
                 f"MACs {self.dense_macs} -> {self.final_macs}"]
        for lc in self.layers:
            lines.append(f"  {lc.name}: pattern {float(lc.pattern_factor):.4g}x "
                         f"connectivity {float(lc.connectivity_factor):.4g}x")
        return "\n".join(lines)


def _layer_compression(name, layer, spec, in_shape):
    dense = to_dense(layer)
    kk = dense.kernel_h * dense.kernel_w
    dense_macs = mac_count(dense, spec, in_shape)
    positions = dense_macs // (dense.filters * dense.channels * kk)
    if isinstance(layer, PrunedConvLayer):
        pattern = positions * dense.filters * dense.channels * layer.nnz
        final = mac_count(layer, spec, in_shape)
        final_w = layer.nnz * layer.retained_kernels
    else:
        pattern = final = dense_macs
        final_w = dense.weights.size
    return LayerCompression(name, dense_macs, pattern, final, dense.weights.size, final_w)


def compression_stats(model: Union[ModelGraph, PrunedConvLayer, DenseConvLayer]) -> CompressionReport:
    """Aggregate pattern / connectivity compression of a model or a single layer.

    A bare layer is accounted per output position (its factors do not depend
    on the spatial size).
    """
    if isinstance(model, (PrunedConvLayer, DenseConvLayer)):
        spec = model.default_spec()
        items = [_layer_compression("layer", model, spec, (model.channels, 3, 3))]
    else:
        items = []
        for node, shape in zip(model.layers, model.input_shapes()):
            if isinstance(node, Conv):
                items.append(_layer_compression(node.name, node.layer, node.spec, shape))
    dense = sum(i.dense_macs for i in items)
    pattern = sum(i.pattern_macs for i in items)
    final = sum(i.final_macs for i in items)
    if final == 0:
        raise ValidationError("model retains no convolution kernels; factors are undefined")
    pf = Fraction(dense, pattern)
    cf = Fraction(pattern, final)
    return CompressionReport(pf, cf, pf * cf,
                             sum(i.dense_weights for i in items),
                             sum(i.final_weights for i in items),
                             dense, final, tuple(items))
