"""On-disk formats: the ``.pconv`` model container and raw tensor files.

A ``.pconv`` file is::

    offset  size  content
    0       8     magic b"PCONVMDL"
    8       4     format version (u32 LE), currently 1
    12      4     manifest length M in bytes (u32 LE)
    16      M     manifest, UTF-8 JSON
    16+M    8     blob length B in bytes (u64 LE)
    24+M    B     weight blob, float32 LE

The manifest lists layers in order. Every float array (conv weights, compact
pattern weights, biases, linear weights) is a ``[offset, count]`` slice of
the blob, counted in floats, in logical (uncompiled) order. Pattern ids are
stored in the manifest as one hex string per filter, two digits per channel,
``ff`` marking a pruned kernel.

A tensor file is ``ndim`` (u32 LE), ``ndim`` dims (u32 LE each), then the
float32 LE payload in row-major order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Tuple

import numpy as np

from .errors import FormatError, ValidationError
from .model import PRUNED, Conv, Linear, MaxPool, ModelGraph, PrunedConvLayer, ReLU
from .patterns import PatternSet
from .tensor import ConvSpec, DenseConvLayer

__all__ = [
    "MODEL_MAGIC",
    "MODEL_VERSION",
    "serialize_model",
    "deserialize_model",
    "pack_model",
    "unpack_model",
    "save_model",
    "load_model",
    "write_tensor",
    "read_tensor",
]

MODEL_MAGIC = b"PCONVMDL"
MODEL_VERSION = 1
_F32 = np.dtype("<f4")


class _Blob:
    def __init__(self):
        self.parts = []
        self.size = 0

    def add(self, arr) -> list:
        a = np.ascontiguousarray(arr, dtype=_F32).ravel()
        ref = [self.size, int(a.size)]
        self.parts.append(a)
        self.size += a.size
        return ref

    def bytes(self) -> bytes:
        return b"".join(p.tobytes() for p in self.parts)


def _ids_to_hex(ids: np.ndarray):
    return [bytes(row).hex() for row in ids]


def _layer_entry(node, blob: _Blob):
    if isinstance(node, Conv):
        entry = {"type": "conv", "name": node.name, "spec": node.spec.to_dict()}
        layer = node.layer
        if isinstance(layer, PrunedConvLayer):
            entry.update(kind="pattern", filters=layer.filters, channels=layer.channels,
                         balanced=layer.balanced, pattern_set=layer.pattern_set.to_dict(),
                         pattern_ids=_ids_to_hex(layer.pattern_ids),
                         weights=blob.add(layer.compact_weights))
        else:
            entry.update(kind="dense", shape=list(layer.weights.shape),
                         weights=blob.add(layer.weights))
        entry["bias"] = blob.add(layer.bias)
        return entry
    if isinstance(node, ReLU):
        return {"type": "relu", "name": node.name}
    if isinstance(node, MaxPool):
        return {"type": "maxpool", "name": node.name, "size": node.size, "stride": node.stride}
    if isinstance(node, Linear):
        return {"type": "linear", "name": node.name, "shape": list(node.weight.shape),
                "weights": blob.add(node.weight), "bias": blob.add(node.bias)}
    raise ValidationError(f"cannot serialize layer of type {type(node).__name__}")


def serialize_model(model: ModelGraph) -> Tuple[bytes, bytes]:
    """Return ``(manifest, blob)``; the manifest is versioned JSON text."""
    blob = _Blob()
    layers = [_layer_entry(n, blob) for n in model.layers]
    manifest = {"format": "patconv-model", "version": MODEL_VERSION,
                "input_shape": list(model.input_shape), "blob_floats": blob.size,
                "layers": layers}
    return (json.dumps(manifest, indent=1) + "\n").encode("utf-8"), blob.bytes()


def _slice(values: np.ndarray, ref, what, base_offset):
    try:
        start, count = int(ref[0]), int(ref[1])
    except (TypeError, ValueError, IndexError):
        raise FormatError(f"{what}: malformed blob reference {ref!r}") from None
    if start < 0 or count < 0 or start + count > values.size:
        raise FormatError(f"{what}: blob slice [{start}, {start + count}) floats is outside the "
                          f"{values.size}-float blob", base_offset + 4 * min(start, values.size))
    return values[start:start + count]


def _decode_ids(rows, f, c, name):
    if not isinstance(rows, list) or len(rows) != f:
        raise FormatError(f"{name}: expected {f} pattern-id rows")
    ids = np.empty((f, c), np.uint8)
    for i, row in enumerate(rows):
        try:
            raw = bytes.fromhex(row)
        except (TypeError, ValueError):
            raise FormatError(f"{name}: pattern-id row {i} is not hex") from None
        if len(raw) != c:
            raise FormatError(f"{name}: pattern-id row {i} has {len(raw)} entries, expected {c}")
        ids[i] = np.frombuffer(raw, np.uint8)
    return ids


def _node_from_entry(e, values, base_offset):
    kind = e.get("type")
    name = e.get("name")
    if kind == "relu":
        return ReLU(name)
    if kind == "maxpool":
        return MaxPool(name, int(e["size"]), int(e["stride"]))
    if kind == "linear":
        w = _slice(values, e["weights"], f"{name}.weights", base_offset).reshape(e["shape"])
        return Linear(name, w, _slice(values, e["bias"], f"{name}.bias", base_offset))
    if kind != "conv":
        raise FormatError(f"unknown layer type {kind!r}")
    spec = ConvSpec(**e["spec"])
    bias = _slice(values, e["bias"], f"{name}.bias", base_offset)
    w = _slice(values, e["weights"], f"{name}.weights", base_offset)
    if e["kind"] == "dense":
        return Conv(name, DenseConvLayer(w.reshape(e["shape"]), bias), spec)
    pset = PatternSet.from_dict(e["pattern_set"])
    f, c = int(e["filters"]), int(e["channels"])
    ids = _decode_ids(e["pattern_ids"], f, c, name)
    bad = np.argwhere((ids != PRUNED) & (ids >= len(pset)))
    if bad.size:
        fi, ci = map(int, bad[0])
        raise ValidationError(f"{name}: filter {fi} channel {ci} has pattern id {ids[fi, ci]}, "
                              f"but the pattern set has {len(pset)} entries")
    layer = PrunedConvLayer(pset, ids, w, bias, bool(e.get("balanced", False)))
    return Conv(name, layer, spec)


def deserialize_model(manifest: bytes, blob: bytes, blob_offset: int = 0) -> ModelGraph:
    """Inverse of :func:`serialize_model`. ``blob_offset`` shifts reported byte offsets."""
    try:
        doc = json.loads(manifest.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise FormatError("manifest is not UTF-8", exc.start) from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc.msg}", exc.pos) from None
    if doc.get("format") != "patconv-model":
        raise FormatError(f"not a model manifest: format={doc.get('format')!r}")
    if doc.get("version") != MODEL_VERSION:
        raise FormatError(f"unsupported model version {doc.get('version')} "
                          f"(expected {MODEL_VERSION})")
    expected = 4 * int(doc.get("blob_floats", -1))
    if len(blob) != expected:
        raise FormatError(f"weight blob length mismatch: expected {expected} bytes, got "
                          f"{len(blob)}", blob_offset + min(len(blob), expected))
    values = np.frombuffer(blob, _F32).astype(np.float32)
    try:
        layers = [_node_from_entry(e, values, blob_offset) for e in doc["layers"]]
    except KeyError as exc:
        raise FormatError(f"manifest layer entry is missing field {exc}") from None
    return ModelGraph(tuple(doc["input_shape"]), layers)


def pack_model(model: ModelGraph) -> bytes:
    manifest, blob = serialize_model(model)
    return b"".join([MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(manifest)), manifest,
                     struct.pack("<Q", len(blob)), blob])


def unpack_model(data: bytes) -> ModelGraph:
    if len(data) < 16 or data[:8] != MODEL_MAGIC:
        raise FormatError("missing PCONVMDL magic", 0)
    version, m_len = struct.unpack_from("<II", data, 8)
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported container version {version} (expected {MODEL_VERSION})", 8)
    m_end = 16 + m_len
    if len(data) < m_end + 8:
        raise FormatError(f"file truncated inside the manifest: expected at least {m_end + 8} "
                          f"bytes, got {len(data)}", len(data))
    (b_len,) = struct.unpack_from("<Q", data, m_end)
    blob = data[m_end + 8:]
    if len(blob) != b_len:
        raise FormatError(f"weight blob length mismatch: header says {b_len} bytes, file holds "
                          f"{len(blob)}", m_end + 8 + min(len(blob), b_len))
    return deserialize_model(data[16:m_end], blob, m_end + 8)


def save_model(model: ModelGraph, path) -> None:
    Path(path).write_bytes(pack_model(model))


def load_model(path) -> ModelGraph:
    return unpack_model(Path(path).read_bytes())


def write_tensor(path, array) -> None:
    a = np.ascontiguousarray(array, dtype=_F32)
    header = struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape)
    Path(path).write_bytes(header + a.tobytes())


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FormatError("tensor file too short for its header", len(data))
    (ndim,) = struct.unpack_from("<I", data, 0)
    if ndim < 1 or ndim > 8:
        raise FormatError(f"implausible tensor rank {ndim}", 0)
    head = 4 + 4 * ndim
    if len(data) < head:
        raise FormatError("tensor file truncated inside its header", len(data))
    dims = struct.unpack_from(f"<{ndim}I", data, 4)
    expected = 4 * int(np.prod(dims))
    if len(data) - head != expected:
        raise FormatError(f"tensor payload length mismatch: expected {expected} bytes for dims "
                          f"{dims}, got {len(data) - head}", head + min(expected, len(data) - head))
    return np.frombuffer(data, _F32, offset=head).astype(np.float32).reshape(dims)
