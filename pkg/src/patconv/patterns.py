"""3x3 sparse convolution patterns (SCPs) and pattern libraries.

A mask is encoded as a 9-bit integer read row-major with bit 0 at the
top-left position, so ``code = sum(1 << (3*r + c))`` over its set positions.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence, Tuple

import numpy as np

from .errors import FormatError, ShapeError, ValidationError
from .filters import Filter2D, elog_filter

__all__ = [
    "PatternMask",
    "PatternSet",
    "encode_mask",
    "decode_mask",
    "canonical_scp_set",
    "extended_pattern_set",
    "mixture_expectation",
    "interpolation_depth_bounds",
    "covers_depth",
    "write_pattern_manifest",
    "read_pattern_manifest",
    "MAX_PATTERNS",
]

MAX_PATTERNS = 255  # 255 itself is the pruned-kernel sentinel
MANIFEST_VERSION = 1

# Cross-arm positions, in the order in which the canonical masks drop them.
_ARMS = ((0, 1), (1, 0), (1, 2), (2, 1))
_CENTER = (1, 1)


def encode_mask(bits) -> int:
    arr = np.asarray(bits)
    if arr.shape != (3, 3):
        raise ShapeError(f"pattern masks are 3x3, got shape {arr.shape}")
    code = 0
    for r in range(3):
        for c in range(3):
            if arr[r, c]:
                code |= 1 << (3 * r + c)
    return code


def decode_mask(code: int) -> np.ndarray:
    if not 0 <= code < 512:
        raise ValidationError(f"mask code {code} is not a 9-bit integer")
    return np.array([[(code >> (3 * r + c)) & 1 for c in range(3)] for r in range(3)], np.uint8)


@dataclass(frozen=True)
class PatternMask:
    """A 3x3 binary mask with its library id."""

    code: int
    id: int = 0

    def __post_init__(self):
        if not 0 <= int(self.code) < 512:
            raise ValidationError(f"mask code {self.code} is not a 9-bit integer")
        object.__setattr__(self, "code", int(self.code))
        object.__setattr__(self, "id", int(self.id))

    @classmethod
    def from_bits(cls, bits, id=0):
        return cls(encode_mask(bits), id)

    @property
    def bits(self) -> np.ndarray:
        return decode_mask(self.code)

    @property
    def popcount(self) -> int:
        return bin(self.code).count("1")

    @property
    def positions(self) -> Tuple[Tuple[int, int], ...]:
        """Set positions (row, col) in row-major order."""
        return tuple((i // 3, i % 3) for i in range(9) if self.code >> i & 1)

    @property
    def flat_positions(self) -> Tuple[int, ...]:
        return tuple(i for i in range(9) if self.code >> i & 1)

    def has(self, r, c) -> bool:
        return bool(self.code >> (3 * r + c) & 1)

    def __str__(self):
        return "\n".join("".join("x" if v else "." for v in row) for row in self.bits)


class PatternSet:
    """Ordered, duplicate-free library of masks that all keep ``nnz`` weights."""

    def __init__(self, masks: Iterable, nnz: int = None):
        masks = [m if isinstance(m, PatternMask) else PatternMask(int(m)) for m in masks]
        if not masks:
            raise ValidationError("a pattern set needs at least one mask")
        if len(masks) > MAX_PATTERNS:
            raise ValidationError(f"at most {MAX_PATTERNS} patterns are supported, got {len(masks)}")
        masks = [PatternMask(m.code, i) for i, m in enumerate(masks)]
        codes = [m.code for m in masks]
        if len(set(codes)) != len(codes):
            raise ValidationError(f"pattern masks must be pairwise distinct, got codes {codes}")
        if nnz is None:
            nnz = masks[0].popcount
        bad = [m.code for m in masks if m.popcount != nnz]
        if bad:
            raise ValidationError(f"masks {bad} do not have {nnz} non-zeros")
        self._masks = tuple(masks)
        self.nnz = int(nnz)

    @classmethod
    def from_codes(cls, codes: Sequence[int], nnz: int = None):
        return cls([PatternMask(int(c)) for c in codes], nnz)

    @property
    def masks(self) -> Tuple[PatternMask, ...]:
        return self._masks

    @property
    def codes(self) -> Tuple[int, ...]:
        return tuple(m.code for m in self._masks)

    def __len__(self):
        return len(self._masks)

    def __iter__(self):
        return iter(self._masks)

    def __getitem__(self, i) -> PatternMask:
        return self._masks[i]

    def __eq__(self, other):
        return isinstance(other, PatternSet) and self.codes == other.codes and self.nnz == other.nnz

    def __hash__(self):
        return hash((self.codes, self.nnz))

    def __repr__(self):
        return f"PatternSet(codes={list(self.codes)}, nnz={self.nnz})"

    def matrix(self) -> np.ndarray:
        """(P, 9) 0/1 matrix, one flattened mask per row."""
        return np.array([m.bits.ravel() for m in self._masks], np.uint8)

    def positions(self) -> np.ndarray:
        """(P, nnz) flat kernel positions of each mask, ascending."""
        return np.array([m.flat_positions for m in self._masks], np.int64)

    def union(self) -> Tuple[Tuple[int, int], ...]:
        code = 0
        for m in self._masks:
            code |= m.code
        return PatternMask(code).positions

    def to_dict(self):
        return {"nnz": self.nnz, "codes": list(self.codes)}

    @classmethod
    def from_dict(cls, d):
        return cls.from_codes(d["codes"], d.get("nnz"))


def canonical_scp_set() -> PatternSet:
    """The four canonical SCPs: the center plus three of the four cross arms.

    Mask ``i`` drops arm ``i`` of (top, left, right, bottom).
    """
    masks = []
    for missing in _ARMS:
        bits = np.zeros((3, 3), np.uint8)
        bits[_CENTER] = 1
        for arm in _ARMS:
            if arm != missing:
                bits[arm] = 1
        masks.append(PatternMask.from_bits(bits))
    return PatternSet(masks, 4)


def _elog_mass(code, weights):
    return sum(weights[i] for i in range(9) if code >> i & 1)


def extended_pattern_set(count: int, nnz: int = 4) -> PatternSet:
    """Canonical SCPs followed by further ``nnz``-element masks.

    Extra masks are ranked by the ELoG weight they retain (descending), ties
    broken by the smaller code. ``count`` must lie in ``[4, C(9, nnz)]``.
    """
    all_codes = [sum(1 << i for i in combo) for combo in itertools.combinations(range(9), nnz)]
    if not 4 <= count <= len(all_codes):
        raise ValidationError(f"pattern count must be in [4, {len(all_codes)}], got {count}")
    if nnz != 4:
        raise ValidationError("extended pattern sets are defined for 4 non-zeros per kernel")
    base = list(canonical_scp_set().codes)
    weights = [float(v) for row in elog_filter().values for v in row]
    rest = sorted((c for c in all_codes if c not in base),
                  key=lambda c: (-_elog_mass(c, weights), c))
    return PatternSet.from_codes(base + rest[:count - len(base)], nnz)


def mixture_expectation(pset: PatternSet, base: Filter2D) -> Filter2D:
    """Uniform average over the set of ``mask * base`` in exact arithmetic."""
    if base.shape != (3, 3):
        raise ShapeError(f"base filter must be 3x3, got {base.shape}")
    vals = [[Fraction(v) for v in row] for row in base.values]
    total = [[Fraction(0)] * 3 for _ in range(3)]
    for m in pset:
        for r, c in m.positions:
            total[r][c] += vals[r][c]
    n = len(pset)
    return Filter2D(tuple(tuple(v / n for v in row) for row in total))


_LOG_APPLICATIONS_DESIRED = 6
_LOG_APPLICATIONS_MAX = 10
_CANONICAL_COUNT = 4


def interpolation_depth_bounds() -> Tuple[int, int]:
    """(desired, maximum) number of 3x3 layers the canonical SCPs should be spread over.

    The desired depth is 4 masks x 6 LoG applications = 24. The maximum, 55,
    does not follow from 4 x 10 and is kept as a fixed constant.
    """
    desired = _CANONICAL_COUNT * _LOG_APPLICATIONS_DESIRED
    maximum = 55
    return desired, maximum


def covers_depth(conv3x3_layers: int) -> bool:
    """Whether a network with this many 3x3 conv layers is within the upper bound."""
    return conv3x3_layers <= interpolation_depth_bounds()[1]


def write_pattern_manifest(pset: PatternSet, path) -> None:
    doc = {"format": "patconv-patterns", "version": MANIFEST_VERSION,
           "nnz": pset.nnz, "count": len(pset), "codes": list(pset.codes)}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_pattern_manifest(path) -> PatternSet:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"pattern manifest is not valid JSON: {exc.msg}", exc.pos) from None
    if doc.get("format") != "patconv-patterns":
        raise FormatError(f"not a pattern manifest: format={doc.get('format')!r}")
    if doc.get("version") != MANIFEST_VERSION:
        raise FormatError(f"unsupported pattern manifest version {doc.get('version')} "
                          f"(expected {MANIFEST_VERSION})")
    pset = PatternSet.from_codes(doc["codes"], doc["nnz"])
    if "count" in doc and doc["count"] != len(pset):
        raise FormatError(f"manifest count {doc['count']} != {len(pset)} codes listed")
    return pset
