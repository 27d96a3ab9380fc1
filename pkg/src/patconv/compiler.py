"""Lower pruned conv layers into execution plans.

Three passes per layer: layerwise information extraction, filter kernel
reorder (filters with identical pattern signatures become adjacent; inside a
filter, kernels are grouped by pattern) and load-redundancy elimination
(every pattern gets one precomputed table of input offsets).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import FormatError, PlanMismatchError, ShapeError, ValidationError
from .model import Conv, LayerInfo, MaxPool, ModelGraph, PrunedConvLayer, ReLU, extract_layer_info
from .patterns import PatternSet
from .tensor import ConvSpec

__all__ = [
    "AccessTemplate",
    "FilterGroup",
    "WorkUnit",
    "ExecutionPlan",
    "layer_fingerprint",
    "filter_kernel_reorder",
    "build_access_templates",
    "compile_layer",
    "compile_model",
    "permute_channels",
    "propagate_permutation",
    "plans_to_json",
    "plans_from_json",
    "write_plans",
    "read_plans",
    "emit_plan_text",
    "PLAN_VERSION",
]

PLAN_VERSION = 1


@dataclass(frozen=True)
class AccessTemplate:
    """Input offsets, relative to the receptive field's top-left, of one pattern's taps."""

    pattern_id: int
    offsets: Tuple[int, ...]

    @property
    def count(self):
        return len(self.offsets)


@dataclass(frozen=True)
class FilterGroup:
    """Filters ``[start, stop)`` (reordered positions) sharing one pattern signature."""

    start: int
    stop: int
    signature: Tuple[int, ...]
    macs: int

    @property
    def size(self):
        return self.stop - self.start


@dataclass(frozen=True)
class WorkUnit:
    """Contiguous slice of one group, the unit handed to a worker."""

    group: int
    start: int
    stop: int
    macs: int


@dataclass(frozen=True, eq=False)
class ExecutionPlan:
    """Compiled schedule for one pruned layer.

    ``permutation[old] = new`` gives the output-channel position of each
    original filter; ``kernel_orders[new]`` is the channel visit sequence of
    the filter at reordered position ``new``. ``partition[w]`` lists the work
    units of worker ``w``. ``macs`` fields count multiply-adds per image.
    """

    name: str
    fingerprint: str
    filters: int
    channels: int
    nnz: int
    spec: ConvSpec
    input_hw: Tuple[int, int]
    permutation: Tuple[int, ...]
    kernel_orders: Tuple[Tuple[int, ...], ...]
    templates: Tuple[AccessTemplate, ...]
    groups: Tuple[FilterGroup, ...]
    units: Tuple[WorkUnit, ...]
    partition: Tuple[Tuple[int, ...], ...]

    @property
    def threads(self) -> int:
        return len(self.partition)

    @property
    def order(self) -> Tuple[int, ...]:
        """Inverse permutation: ``order[new] = old``."""
        inv = [0] * self.filters
        for old, new in enumerate(self.permutation):
            inv[new] = old
        return tuple(inv)

    @property
    def row_stride(self) -> int:
        return self.input_hw[1] + 2 * self.spec.padding

    @property
    def output_hw(self):
        return self.spec.output_hw(*self.input_hw)

    def worker_macs(self) -> Tuple[int, ...]:
        return tuple(sum(self.units[u].macs for u in part) for part in self.partition)

    def unpermute(self, y):
        """Map an output in compiled channel order back to logical order (axis 1)."""
        return np.asarray(y)[:, list(self.permutation)]


def layer_fingerprint(layer: PrunedConvLayer, spec: ConvSpec, input_hw) -> str:
    """Hash of everything a plan depends on: shape, pattern library, ids, ConvSpec and input size."""
    h = hashlib.sha256()
    meta = {"f": layer.filters, "c": layer.channels, "codes": list(layer.pattern_set.codes),
            "spec": spec.to_dict(), "hw": [int(v) for v in input_hw]}
    h.update(json.dumps(meta, sort_keys=True).encode())
    h.update(np.ascontiguousarray(layer.pattern_ids).tobytes())
    return h.hexdigest()[:16]


def filter_kernel_reorder(info: LayerInfo):
    """Sort filters by (signature, index); inside each filter sort kernels by (pattern, channel).

    Returns ``(permutation, kernel_orders)`` with ``permutation[old] = new``
    and ``kernel_orders[old]`` the channel visit order of original filter
    ``old``.
    """
    order = sorted(range(info.filters), key=lambda f: (info.signatures[f], f))
    perm = [0] * info.filters
    for new, old in enumerate(order):
        perm[old] = new
    kernel_orders = []
    for f in range(info.filters):
        pairs = sorted(zip(info.kernel_patterns[f], info.connectivity[f]))
        kernel_orders.append(tuple(c for _, c in pairs))
    return tuple(perm), tuple(kernel_orders)


def build_access_templates(pset: PatternSet, row_stride: int) -> Tuple[AccessTemplate, ...]:
    """Offsets ``r * row_stride + c`` of each mask position, ascending."""
    if row_stride < 3:
        raise ShapeError(f"row stride must be at least 3, got {row_stride}")
    return tuple(AccessTemplate(m.id, tuple(r * row_stride + c for r, c in m.positions))
                 for m in pset)


def _groups(info, order, per_pos):
    groups = []
    start = 0
    for new in range(1, info.filters + 1):
        if new == info.filters or info.signatures[order[new]] != info.signatures[order[start]]:
            sig = info.signatures[order[start]]
            macs = sum(info.filter_macs[order[i]] for i in range(start, new)) * per_pos
            groups.append(FilterGroup(start, new, sig, macs))
            start = new
    return groups


def _partition(groups, info, order, per_pos, threads):
    """Split each group into at most ``threads`` near-equal slices, then assign
    slices greedily (largest first) to the least-loaded worker."""
    units = []
    for gi, g in enumerate(groups):
        parts = min(threads, g.size)
        bounds = np.linspace(g.start, g.stop, parts + 1).round().astype(int)
        for a, b in zip(bounds[:-1], bounds[1:]):
            if b > a:
                macs = sum(info.filter_macs[order[i]] for i in range(a, b)) * per_pos
                units.append(WorkUnit(gi, int(a), int(b), macs))
    load = [0] * threads
    assign = [[] for _ in range(threads)]
    for ui in sorted(range(len(units)), key=lambda u: (-units[u].macs, u)):
        w = min(range(threads), key=lambda t: (load[t], t))
        assign[w].append(ui)
        load[w] += units[ui].macs
    return tuple(units), tuple(tuple(sorted(a)) for a in assign)


def compile_layer(layer: PrunedConvLayer, spec: ConvSpec, input_hw, threads: int = 1,
                  name: str = "conv") -> ExecutionPlan:
    """Information extraction, filter kernel reorder, access templates and thread partition."""
    if threads < 1:
        raise ValidationError(f"threads must be >= 1, got {threads}")
    if not isinstance(layer, PrunedConvLayer):
        raise ValidationError("only pattern-pruned layers can be compiled")
    if (spec.kernel_h, spec.kernel_w) != (3, 3):
        raise ShapeError("pattern plans need a 3x3 ConvSpec")
    input_hw = (int(input_hw[0]), int(input_hw[1]))
    ho, wo = spec.output_hw(*input_hw)
    info = extract_layer_info(layer)
    perm, korders_old = filter_kernel_reorder(info)
    order = [0] * info.filters
    for old, new in enumerate(perm):
        order[new] = old
    kernel_orders = tuple(korders_old[old] for old in order)
    templates = build_access_templates(layer.pattern_set, input_hw[1] + 2 * spec.padding)
    per_pos = ho * wo
    groups = _groups(info, order, per_pos)
    units, partition = _partition(groups, info, order, per_pos, int(threads))
    return ExecutionPlan(name, layer_fingerprint(layer, spec, input_hw), layer.filters,
                         layer.channels, layer.nnz, spec, input_hw, perm, kernel_orders,
                         templates, tuple(groups), units, partition)


def permute_channels(layer: PrunedConvLayer, permutation: Sequence[int]) -> PrunedConvLayer:
    """Move input channel ``c`` of ``layer`` to position ``permutation[c]``."""
    perm = np.asarray(permutation, np.int64)
    if perm.shape != (layer.channels,) or sorted(perm.tolist()) != list(range(layer.channels)):
        raise ShapeError(f"permutation of length {perm.size} is not a bijection on "
                         f"{layer.channels} channels")
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    ids = layer.pattern_ids[:, inv]
    w_old = layer.compact_weights.reshape(-1, layer.nnz)
    offs = layer.weight_offsets()[:, inv].ravel()
    w_new = w_old[offs[offs >= 0] // layer.nnz].ravel() if w_old.size else w_old.ravel()
    return PrunedConvLayer(layer.pattern_set, ids, w_new, layer.bias, layer.balanced)


def propagate_permutation(plan: ExecutionPlan, next_layer: PrunedConvLayer) -> PrunedConvLayer:
    """Reindex the next layer's input channels to match this plan's output order."""
    if next_layer.channels != plan.filters:
        raise ShapeError(f"next layer has {next_layer.channels} channels, plan produces "
                         f"{plan.filters}")
    return permute_channels(next_layer, plan.permutation)


def compile_model(model: ModelGraph, threads: int = 1) -> List[Optional[ExecutionPlan]]:
    """Compile every pruned conv layer, threading output permutations downstream.

    Returns one entry per conv layer (``None`` for dense convs). Each plan is
    compiled against its layer with input channels already permuted.
    """
    plans = []
    perm = None
    for node, shape in zip(model.layers, model.input_shapes()):
        if isinstance(node, Conv):
            if isinstance(node.layer, PrunedConvLayer):
                layer = node.layer if perm is None else permute_channels(node.layer, perm)
                plan = compile_layer(layer, node.spec, shape[1:], threads, node.name)
                plans.append(plan)
                perm = plan.permutation
            else:
                plans.append(None)
                perm = None
        elif not _channelwise(node):
            perm = None
    return plans


def _channelwise(node) -> bool:
    return isinstance(node, (ReLU, MaxPool))


def _plan_to_dict(plan: ExecutionPlan):
    return {
        "name": plan.name,
        "fingerprint": plan.fingerprint,
        "filters": plan.filters,
        "channels": plan.channels,
        "nnz": plan.nnz,
        "spec": plan.spec.to_dict(),
        "input_hw": list(plan.input_hw),
        "permutation": list(plan.permutation),
        "kernel_orders": [list(k) for k in plan.kernel_orders],
        "templates": [{"pattern": t.pattern_id, "offsets": list(t.offsets)} for t in plan.templates],
        "groups": [{"start": g.start, "stop": g.stop, "signature": list(g.signature),
                    "macs": g.macs} for g in plan.groups],
        "units": [{"group": u.group, "start": u.start, "stop": u.stop, "macs": u.macs}
                  for u in plan.units],
        "partition": [list(p) for p in plan.partition],
    }


def _plan_from_dict(d) -> ExecutionPlan:
    try:
        plan = ExecutionPlan(
            d["name"], d["fingerprint"], int(d["filters"]), int(d["channels"]), int(d["nnz"]),
            ConvSpec(**d["spec"]), tuple(d["input_hw"]), tuple(d["permutation"]),
            tuple(tuple(k) for k in d["kernel_orders"]),
            tuple(AccessTemplate(t["pattern"], tuple(t["offsets"])) for t in d["templates"]),
            tuple(FilterGroup(g["start"], g["stop"], tuple(g["signature"]), g["macs"])
                  for g in d["groups"]),
            tuple(WorkUnit(u["group"], u["start"], u["stop"], u["macs"]) for u in d["units"]),
            tuple(tuple(p) for p in d["partition"]))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed plan entry: {exc!r}") from None
    if sorted(plan.permutation) != list(range(plan.filters)):
        raise FormatError(f"plan {plan.name}: permutation is not a bijection")
    covered = sorted(u for part in plan.partition for u in part)
    if covered != list(range(len(plan.units))):
        raise FormatError(f"plan {plan.name}: partition does not cover every work unit once")
    return plan


def plans_to_json(plans: Sequence[Optional[ExecutionPlan]]) -> str:
    doc = {"format": "patconv-plan", "version": PLAN_VERSION,
           "layers": [None if p is None else _plan_to_dict(p) for p in plans]}
    return json.dumps(doc, indent=1) + "\n"


def plans_from_json(text: str) -> List[Optional[ExecutionPlan]]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"plan file is not valid JSON: {exc.msg}", exc.pos) from None
    if doc.get("format") != "patconv-plan":
        raise FormatError(f"not a plan file: format={doc.get('format')!r}")
    if doc.get("version") != PLAN_VERSION:
        raise FormatError(f"unsupported plan version {doc.get('version')} (expected {PLAN_VERSION})")
    return [None if d is None else _plan_from_dict(d) for d in doc["layers"]]


def write_plans(plans, path) -> None:
    Path(path).write_text(plans_to_json(plans))


def read_plans(path) -> List[Optional[ExecutionPlan]]:
    return plans_from_json(Path(path).read_text())


def _offset_expr(off, stride):
    r, c = divmod(off, stride)
    terms = []
    if r:
        terms.append(f"{r}*W" if r > 1 else "W")
    if c or not terms:
        terms.append(str(c))
    return "+".join(terms)


def emit_plan_text(plan: ExecutionPlan, kernel_patterns=None) -> str:
    """Human-readable dump of the specialised loop nest of every filter group."""
    stride = plan.row_stride
    lines = [f"layer {plan.name}: F={plan.filters} C={plan.channels} nnz={plan.nnz} "
             f"input={plan.input_hw[0]}x{plan.input_hw[1]} stride={plan.spec.stride} "
             f"pad={plan.spec.padding} fingerprint={plan.fingerprint}",
             f"  access templates (W = padded row stride {stride}):"]
    for t in plan.templates:
        lines.append(f"    pattern {t.pattern_id}: "
                     + ", ".join(_offset_expr(o, stride) for o in t.offsets))
    owner = {}
    for w, part in enumerate(plan.partition):
        for u in part:
            owner[u] = w
    for gi, g in enumerate(plan.groups):
        lines.append(f"  group {gi}: filters [{g.start}, {g.stop}) macs={g.macs}")
        for ui, u in enumerate(plan.units):
            if u.group == gi:
                lines.append(f"    worker {owner[ui]}: filters [{u.start}, {u.stop})")
        runs = []
        for p in g.signature:
            if runs and runs[-1][0] == p:
                runs[-1][1] += 1
            else:
                runs.append([p, 1])
        lines.append("    for f in group:")
        lines.append("      for each output row band:")
        if not runs:
            lines.append("        (no retained kernels: bias only)")
        for p, n in runs:
            lines.append(f"        {n} x pattern {p}: out += "
                         + " + ".join(f"w{i}*x[c][{_offset_expr(o, stride)}]"
                                      for i, o in enumerate(plan.templates[p].offsets)))
    return "\n".join(lines)
