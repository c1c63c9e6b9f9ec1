"""N:M masks: magnitude selection, application and flip-rate metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, PatternError


@dataclass(frozen=True)
class NMPattern:
    """Keep ``n`` entries out of every ``m`` consecutive entries of a row."""

    n: int
    m: int

    def __post_init__(self):
        if not (1 <= self.n < self.m):
            raise PatternError(f"invalid N:M pattern {self.n}:{self.m}; need 1 <= n < m")

    @classmethod
    def parse(cls, text: str) -> "NMPattern":
        n, m = text.split(":")
        return cls(int(n), int(m))

    @property
    def half(self) -> bool:
        return 2 * self.n == self.m

    def __str__(self) -> str:
        return f"{self.n}:{self.m}"


@dataclass
class Mask:
    """Boolean keep-mask plus the pattern it obeys.

    Held as a ``bool`` array in memory; checkpoints store it bit-packed
    (see :meth:`packbits`).
    """

    array: np.ndarray
    pattern: NMPattern

    def __post_init__(self):
        self.array = np.asarray(self.array, dtype=bool)
        check_pattern(self.array, self.pattern)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    def complement(self) -> np.ndarray:
        return ~self.array

    def packbits(self) -> bytes:
        return np.packbits(self.array.reshape(-1), bitorder="little").tobytes()

    @classmethod
    def unpackbits(cls, raw: bytes, shape, pattern: NMPattern) -> "Mask":
        count = int(np.prod(shape))
        bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=count, bitorder="little")
        return cls(bits.astype(bool).reshape(shape), pattern)

    def copy(self) -> "Mask":
        return Mask(self.array.copy(), self.pattern)


def _groups(shape, pattern: NMPattern) -> tuple[int, int]:
    if len(shape) != 2:
        raise DimensionError(f"N:M masks apply to matrices, got shape {tuple(shape)}")
    rows, cols = shape
    if cols % pattern.m:
        raise DimensionError(f"row length {cols} not divisible by group size {pattern.m}")
    return rows, cols // pattern.m


def check_pattern(mask: np.ndarray, pattern: NMPattern) -> None:
    rows, g = _groups(mask.shape, pattern)
    counts = mask.reshape(rows, g, pattern.m).sum(axis=-1)
    if not np.all(counts == pattern.n):
        bad = np.argwhere(counts != pattern.n)[0]
        raise PatternError(
            f"group (row {bad[0]}, group {bad[1]}) keeps {counts[tuple(bad)]} entries, expected {pattern.n}"
        )


def satisfies_pattern(values: np.ndarray, pattern: NMPattern) -> bool:
    """True when every group has at most ``n`` nonzeros."""
    rows, g = _groups(values.shape, pattern)
    nz = (values != 0).reshape(rows, g, pattern.m).sum(axis=-1)
    return bool(np.all(nz <= pattern.n))


def select_mask_magnitude(w: np.ndarray, pattern: NMPattern) -> Mask:
    """Keep the ``n`` largest-|w| entries in each group; ties keep the lower column."""
    w = np.asarray(w)
    rows, g = _groups(w.shape, pattern)
    mag = np.abs(w).reshape(rows, g, pattern.m)
    if np.isnan(mag).any():
        raise ValueError("cannot select a mask from NaN weights")
    # stable sort on -|w| puts equal magnitudes in column order
    order = np.argsort(-mag, axis=-1, kind="stable")[..., : pattern.n]
    keep = np.zeros(mag.shape, dtype=bool)
    np.put_along_axis(keep, order, True, axis=-1)
    return Mask(keep.reshape(w.shape), pattern)


def apply_mask(w: np.ndarray, mask: Mask | np.ndarray) -> np.ndarray:
    arr = mask.array if isinstance(mask, Mask) else np.asarray(mask, dtype=bool)
    if arr.shape != np.shape(w):
        raise DimensionError(f"mask {arr.shape} vs weight {np.shape(w)}")
    return np.where(arr, w, 0).astype(np.asarray(w).dtype, copy=False)


def _as_bool(m) -> np.ndarray:
    return m.array if isinstance(m, Mask) else np.asarray(m, dtype=bool)


def mask_distance(a, b) -> int:
    a, b = _as_bool(a), _as_bool(b)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes {a.shape} and {b.shape} differ")
    return int(np.count_nonzero(a != b))


def flip_rate(mask_t, mask_prev) -> float:
    """L1 distance between two binary masks over the entry count."""
    d = mask_distance(mask_t, mask_prev)
    return d / _as_bool(mask_t).size


def initial_flip_rate(mask_t, mask_0) -> float:
    return flip_rate(mask_t, mask_0)


@dataclass(frozen=True)
class FlipStats:
    step: int
    flip_rate: float
    initial_flip_rate: float
