"""Small 2-D filters: Gaussian, Laplacian of Gaussian and their 3x3 approximations.

Integer filters are held as exact :class:`fractions.Fraction` entries so the
approximation chain (second difference -> 2-D Laplacians -> enhanced LoG) can
be checked with exact equality.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from numbers import Rational
from typing import Tuple

import numpy as np

from .errors import DomainError, ShapeError

__all__ = [
    "Filter2D",
    "convolve_filters",
    "gaussian_filter",
    "log_filter",
    "log_1d_approx",
    "log_2d_approximations",
    "elog_filter",
    "elog_raw",
]


def _entry(v):
    if isinstance(v, Fraction):
        return v
    if isinstance(v, (bool, np.bool_)):
        raise TypeError("boolean filter entries are not allowed")
    if isinstance(v, (int, np.integer, Rational)):
        return Fraction(int(v)) if isinstance(v, (int, np.integer)) else Fraction(v)
    return float(v)


@dataclass(frozen=True)
class Filter2D:
    """Odd-sized 2-D filter stored as a tuple of rows.

    Rows hold either exact Fractions (integer/rational input) or floats.
    """

    values: Tuple[Tuple, ...]

    def __post_init__(self):
        rows = tuple(tuple(_entry(v) for v in row) for row in self.values)
        if not rows or not rows[0]:
            raise ShapeError("filter must be non-empty")
        width = len(rows[0])
        if any(len(r) != width for r in rows):
            raise ShapeError("filter rows must all have the same length")
        if len(rows) % 2 == 0 or width % 2 == 0:
            raise ShapeError(f"filter dims must be odd, got {len(rows)}x{width}")
        object.__setattr__(self, "values", rows)

    @classmethod
    def from_array(cls, arr, exact=False):
        arr = np.asarray(arr)
        if arr.ndim == 1:
            arr = arr[None, :]
        if exact:
            return cls(tuple(tuple(Fraction(v) for v in row) for row in arr.tolist()))
        return cls(tuple(tuple(float(v) for v in row) for row in arr.tolist()))

    @property
    def height(self) -> int:
        return len(self.values)

    @property
    def width(self) -> int:
        return len(self.values[0])

    @property
    def shape(self):
        return self.height, self.width

    @property
    def exact(self) -> bool:
        return all(isinstance(v, Fraction) for row in self.values for v in row)

    def array(self, dtype=np.float64) -> np.ndarray:
        return np.array([[float(v) for v in row] for row in self.values], dtype=dtype)

    def total(self):
        """Sum of all entries (exact when the filter is exact)."""
        return sum((v for row in self.values for v in row), Fraction(0) if self.exact else 0.0)

    def normalized(self) -> "Filter2D":
        s = self.total()
        if s == 0:
            raise DomainError("cannot normalize a filter whose entries sum to zero")
        return Filter2D(tuple(tuple(v / s for v in row) for row in self.values))

    def scaled(self, factor) -> "Filter2D":
        factor = _entry(factor)
        return Filter2D(tuple(tuple(v * factor for v in row) for row in self.values))

    def __neg__(self):
        return self.scaled(-1)

    def transpose(self) -> "Filter2D":
        return Filter2D(tuple(zip(*self.values)))

    def rot90(self) -> "Filter2D":
        return Filter2D(tuple(zip(*self.values[::-1])))

    def flip_lr(self) -> "Filter2D":
        return Filter2D(tuple(row[::-1] for row in self.values))

    def embed(self, height, width) -> "Filter2D":
        """Center this filter inside a zero filter of the given odd size."""
        if height < self.height or width < self.width:
            raise ShapeError("embedding target is smaller than the filter")
        zero = Fraction(0) if self.exact else 0.0
        top, left = (height - self.height) // 2, (width - self.width) // 2
        rows = [[zero] * width for _ in range(height)]
        for r, row in enumerate(self.values):
            rows[top + r][left:left + self.width] = list(row)
        return Filter2D(tuple(tuple(r) for r in rows))

    def __add__(self, other: "Filter2D") -> "Filter2D":
        h = max(self.height, other.height)
        w = max(self.width, other.width)
        a, b = self.embed(h, w), other.embed(h, w)
        return Filter2D(tuple(tuple(x + y for x, y in zip(ra, rb))
                              for ra, rb in zip(a.values, b.values)))

    def __str__(self):
        return "\n".join(" ".join(str(v) for v in row) for row in self.values)


def convolve_filters(a: Filter2D, b: Filter2D) -> Filter2D:
    """Full 2-D discrete convolution; the result is (ha+hb-1) x (wa+wb-1)."""
    ha, wa = a.shape
    hb, wb = b.shape
    zero = Fraction(0) if (a.exact and b.exact) else 0.0
    out = [[zero] * (wa + wb - 1) for _ in range(ha + hb - 1)]
    for i, row_a in enumerate(a.values):
        for j, va in enumerate(row_a):
            if va == 0:
                continue
            for k, row_b in enumerate(b.values):
                target = out[i + k]
                for l, vb in enumerate(row_b):
                    target[j + l] += va * vb
    return Filter2D(tuple(tuple(r) for r in out))


def _grid(size):
    if not isinstance(size, (int, np.integer)) or size < 1 or size % 2 == 0:
        raise DomainError(f"filter size must be a positive odd integer, got {size!r}")
    r = size // 2
    return range(-r, r + 1)


def _gaussian_value(x, y, sigma):
    return math.exp(-(x * x + y * y) / (2.0 * sigma * sigma)) / (2.0 * math.pi * sigma * sigma)


def gaussian_filter(size: int, sigma: float, normalize: bool = True) -> Filter2D:
    """Sample the isotropic 2-D Gaussian on the centered integer grid.

    With ``normalize`` (the default) the samples are rescaled to unit sum.
    """
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma!r}")
    g = [[_gaussian_value(x, y, sigma) for x in _grid(size)] for y in _grid(size)]
    f = Filter2D(tuple(tuple(r) for r in g))
    return f.normalized() if normalize else f


def log_filter(size: int, sigma: float) -> Filter2D:
    """Sample the Laplacian of Gaussian ``((x^2+y^2)/s^4 - 2/s^2) * G(x, y, s)``."""
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma!r}")
    s2 = sigma * sigma
    rows = []
    for y in _grid(size):
        rows.append(tuple(((x * x + y * y) / (s2 * s2) - 2.0 / s2) * _gaussian_value(x, y, sigma)
                          for x in _grid(size)))
    return Filter2D(tuple(rows))


def log_1d_approx() -> Filter2D:
    """Central second difference, the 1x3 approximation of the 1-D LoG."""
    return Filter2D(((1, -2, 1),))


def log_2d_approximations() -> Tuple[Filter2D, Filter2D]:
    """The two 3x3 LoG approximations built from the 1-D second difference.

    The first is the (sign-flipped) convolution of the row and column second
    differences, ``[[-1,2,-1],[2,-4,2],[-1,2,-1]]``. The second sums them,
    ``G_xx + G_yy``, giving the cross ``[[0,1,0],[1,-4,1],[0,1,0]]``.
    """
    row = log_1d_approx()
    col = row.transpose()
    outer = -convolve_filters(row, col)
    cross = row + col
    return outer, cross


def elog_raw() -> Filter2D:
    """5x5 convolution of the two 3x3 LoG approximations, before any reduction."""
    outer, cross = log_2d_approximations()
    return convolve_filters(outer, cross)


def elog_filter() -> Filter2D:
    """Enhanced LoG ``[[0,1,0],[1,8,1],[0,1,0]]``.

    Returned as the published 3x3 matrix; the reduction from :func:`elog_raw`
    to 3x3 is not defined precisely enough to recompute it.
    """
    return Filter2D(((0, 1, 0), (1, 8, 1), (0, 1, 0)))
