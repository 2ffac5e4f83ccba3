"""Arithmetic in GF(2^61 - 1) and signed fixed-point encoding.

Field elements are plain Python ints in ``[0, P)``. Vectors of field elements
are ``numpy.uint64`` arrays: sums of two reduced elements stay below 2^62, so
addition and subtraction vectorise without overflow. Products go through
Python ints.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

P = (1 << 61) - 1
HALF = P // 2
DEFAULT_SCALE_BITS = 16


class EncodingOverflow(ValueError):
    """A real value does not fit the signed fixed-point range."""


def reduce(x: int) -> int:
    # Mersenne folding; valid for 0 <= x < 2^122
    r = (x >> 61) + (x & P)
    return r - P if r >= P else r


def add(a: int, b: int) -> int:
    s = a + b
    return s - P if s >= P else s


def sub(a: int, b: int) -> int:
    s = a - b
    return s + P if s < 0 else s


def neg(a: int) -> int:
    return P - a if a else 0


def mul(a: int, b: int) -> int:
    return reduce(a * b)


def inv(a: int) -> int:
    """Multiplicative inverse by Fermat's little theorem."""
    if a % P == 0:
        raise ZeroDivisionError("zero has no inverse in GF(p)")
    return pow(a, P - 2, P)


def lift_signed(e: int) -> int:
    """Map a field element to the signed integer in ``[-p/2, p/2)``.

    ``P // 2`` itself stays non-negative.
    """
    return e if e <= HALF else e - P


def max_real(scale_bits: int = DEFAULT_SCALE_BITS) -> float:
    """Largest magnitude that :func:`fp_encode` accepts (exclusive)."""
    return (P / 2) / (1 << scale_bits)


def _round_half_away(x: float) -> int:
    r = int(abs(x) + 0.5)
    return r if x >= 0 else -r


def fp_encode(x: float, scale_bits: int = DEFAULT_SCALE_BITS) -> int:
    """Encode a real as ``round(x * 2^f) mod p``; negatives wrap to the top half."""
    scaled = x * (1 << scale_bits)
    if not np.isfinite(scaled) or abs(scaled) >= P / 2:
        raise EncodingOverflow(f"{x!r} does not fit {scale_bits} fractional bits mod p")
    return _round_half_away(scaled) % P


def fp_decode(e: int, scale_bits: int = DEFAULT_SCALE_BITS) -> float:
    return lift_signed(e) / (1 << scale_bits)


def encode_array(x: np.ndarray, scale_bits: int = DEFAULT_SCALE_BITS) -> np.ndarray:
    """Vectorised :func:`fp_encode` returning a ``uint64`` array."""
    x = np.asarray(x, dtype=np.float64)
    scaled = x * float(1 << scale_bits)
    if not np.all(np.isfinite(scaled)) or np.any(np.abs(scaled) >= P / 2):
        raise EncodingOverflow(f"values out of fixed-point range for {scale_bits} fractional bits")
    rounded = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    ints = rounded.astype(np.int64)
    out = np.where(ints < 0, ints + np.int64(P), ints)
    return out.astype(np.uint64)


def lift_array(e: np.ndarray) -> np.ndarray:
    e = np.asarray(e, dtype=np.uint64)
    signed = e.astype(np.int64)
    return np.where(e > np.uint64(HALF), signed - np.int64(P), signed)


def decode_array(e: np.ndarray, scale_bits: int = DEFAULT_SCALE_BITS) -> np.ndarray:
    return lift_array(e).astype(np.float64) / float(1 << scale_bits)


def vec_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a + b) % np.uint64(P)


def vec_sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a + (np.uint64(P) - b)) % np.uint64(P)


def vec_sum(vectors: Iterable[np.ndarray], length: int) -> np.ndarray:
    acc = np.zeros(length, dtype=np.uint64)
    for v in vectors:
        acc = vec_add(acc, v)
    return acc


def to_field_array(values: Iterable[int]) -> np.ndarray:
    return np.fromiter((int(v) % P for v in values), dtype=np.uint64)


@dataclass(frozen=True)
class FixedVec:
    """A model-sized vector of field elements carrying its fixed-point scale."""

    coords: np.ndarray
    scale_bits: int = DEFAULT_SCALE_BITS

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.uint64)
        if coords.ndim != 1:
            raise ValueError("FixedVec coords must be one-dimensional")
        if coords.size and int(coords.max()) >= P:
            raise ValueError("FixedVec coords must be reduced mod p")
        object.__setattr__(self, "coords", coords)

    @classmethod
    def from_real(cls, x, scale_bits: int = DEFAULT_SCALE_BITS) -> FixedVec:
        return cls(encode_array(x, scale_bits), scale_bits)

    @classmethod
    def zeros(cls, length: int, scale_bits: int = DEFAULT_SCALE_BITS) -> FixedVec:
        return cls(np.zeros(length, dtype=np.uint64), scale_bits)

    def __len__(self) -> int:
        return len(self.coords)

    def __getitem__(self, k: int) -> int:
        return int(self.coords[k])

    def _check(self, other: FixedVec) -> None:
        if len(other) != len(self) or other.scale_bits != self.scale_bits:
            raise ValueError("FixedVec length or scale mismatch")

    def __add__(self, other: FixedVec) -> FixedVec:
        self._check(other)
        return FixedVec(vec_add(self.coords, other.coords), self.scale_bits)

    def __sub__(self, other: FixedVec) -> FixedVec:
        self._check(other)
        return FixedVec(vec_sub(self.coords, other.coords), self.scale_bits)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FixedVec):
            return NotImplemented
        return self.scale_bits == other.scale_bits and np.array_equal(self.coords, other.coords)

    __hash__ = None

    def decode(self) -> np.ndarray:
        return decode_array(self.coords, self.scale_bits)

    def signed(self) -> np.ndarray:
        return lift_array(self.coords)

    def tolist(self) -> list[int]:
        return [int(v) for v in self.coords]
