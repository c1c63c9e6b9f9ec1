"""Packed N:M storage and its compression-ratio accounting.

A ``n:2n`` sparse matrix is stored as its kept values (row-major, ``n`` per
group) plus one index symbol per group: the lexicographic rank of the group's
keep-set among all ``C(2n, n)`` position combinations. Symbols are written
either at a fixed ``ceil(log2 C(2n, n))`` bits or with a canonical Huffman
table built for equiprobable symbols.

Ratio accounting follows a 4-bit value / 32-bit dense convention: the codec
itself keeps float32 values, and the ratios are analytic.

File layout (little-endian)::

    b"NMSP" | version u16 | n u8 | m u8 | rows u32 | cols u32 | coding u8
    | symbol_count u32 | code_length u8 * symbol_count
    | values f32 * (rows * cols / 2) | index bitstream (MSB-first, byte padded)
    | crc32 u32 over everything before it

Fixed coding writes ``symbol_count = 0``.
"""

from __future__ import annotations

import itertools
import math
import struct
import zlib
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .errors import CorruptFileError, DimensionError, PatternError
from .huffman import HuffmanTable, encode_fixed_or_variable, equiprobable_histogram, mean_length
from .sparsity import NMPattern

MAGIC = b"NMSP"
VERSION = 1
CODINGS = ("fixed", "huffman")
VALUE_BITS = 4
DENSE_BITS = 32
UPPER_BOUND = Fraction(3, 32)


# ---------------------------------------------------------------- combinatorics


def binom(n: int, k: int) -> int:
    return math.comb(n, k)


def fixed_bits(n: int) -> int:
    """``ceil(log2 C(2n, n))`` computed on integers."""
    return (binom(2 * n, n) - 1).bit_length()


@lru_cache(maxsize=None)
def keep_sets(n: int, m: int) -> tuple[tuple[int, ...], ...]:
    """All keep-sets in lexicographic order; position in this tuple is the symbol."""
    return tuple(itertools.combinations(range(m), n))


@lru_cache(maxsize=None)
def _rank_lookup(n: int, m: int) -> np.ndarray:
    table = np.full(1 << m, -1, dtype=np.int64)
    for rank, combo in enumerate(keep_sets(n, m)):
        table[sum(1 << i for i in combo)] = rank
    return table


@lru_cache(maxsize=None)
def _position_table(n: int, m: int) -> np.ndarray:
    return np.array(keep_sets(n, m), dtype=np.int64)


def keepset_rank(positions, m: int) -> int:
    """Lexicographic rank of a keep-set among all ``C(m, len(positions))`` combinations."""
    return keep_sets(len(positions), m).index(tuple(sorted(positions)))


@lru_cache(maxsize=None)
def huffman_table(n: int) -> HuffmanTable:
    return HuffmanTable.equiprobable(binom(2 * n, n))


# ---------------------------------------------------------------- analytic ratios


def fixed_ratio(n: int) -> Fraction:
    """``(4n + ceil(log2 C(2n,n))) / (64 n)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return Fraction(VALUE_BITS * n + fixed_bits(n), 2 * n * DENSE_BITS)


def huffman_mean_length(n: int) -> Fraction:
    return mean_length(equiprobable_histogram(binom(2 * n, n)))


def huffman_ratio(n: int) -> Fraction:
    """``(4n + L) / (64 n)`` where ``L`` is the mean equiprobable Huffman code length."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return (VALUE_BITS * n + huffman_mean_length(n)) / (2 * n * DENSE_BITS)


def approx_ratio(n: int) -> float:
    """Ceiling-free approximation ``3/32 - log2(sqrt(pi n)) / (64 n)``."""
    return 3 / 32 - math.log2(math.sqrt(math.pi * n)) / (64 * n)


@dataclass
class BoundRow:
    n: int
    symbols: int
    entropy_bits: float
    mean_bits: Fraction
    fixed_bits: int
    huffman_ratio: Fraction
    fixed_ratio: Fraction
    binom_bound: float


@dataclass
class BoundReport:
    rows: list[BoundRow] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def verify_bound(n_max: int) -> BoundReport:
    """Check ``C(2n,n) <= 4^n / sqrt(pi n)``, the entropy sandwich and ``ratio < 3/32`` for ``n <= n_max``."""
    report = BoundReport()
    for n in range(1, n_max + 1):
        k = binom(2 * n, n)
        entropy = math.log2(k)
        mean = huffman_mean_length(n)
        fb = fixed_bits(n)
        hr = huffman_ratio(n)
        # compare log2 to stay exact-ish for big n: log2 C <= 2n - log2 sqrt(pi n)
        bound_log = 2 * n - 0.5 * math.log2(math.pi * n)
        row = BoundRow(n, k, entropy, mean, fb, hr, fixed_ratio(n), bound_log)
        report.rows.append(row)
        if entropy > bound_log + 1e-12:
            report.violations.append(f"n={n}: log2 C(2n,n)={entropy} exceeds {bound_log}")
        if not (entropy - 1e-12 <= float(mean) <= fb):
            report.violations.append(f"n={n}: mean length {float(mean)} outside [{entropy}, {fb}]")
        if not hr < UPPER_BOUND:
            report.violations.append(f"n={n}: Huffman ratio {float(hr)} not below 3/32")
    return report


# ---------------------------------------------------------------- codec


@dataclass
class PackedSparseTensor:
    pattern: NMPattern
    shape: tuple[int, int]
    values: np.ndarray  # float32, n per group, row-major
    symbols: np.ndarray  # keep-set rank per group
    coding: str
    code_lengths: list[int]
    bitstream: bytes
    bit_length: int

    @property
    def groups(self) -> int:
        return self.symbols.size

    def index_bits(self) -> int:
        return self.bit_length

    def stream_ratio(self) -> float:
        """Ratio from the actual index stream length (4-bit values assumed)."""
        entries = self.shape[0] * self.shape[1]
        return (VALUE_BITS * self.values.size + self.bit_length) / (DENSE_BITS * entries)

    def analytic_ratio(self) -> Fraction:
        n = self.pattern.n
        return fixed_ratio(n) if self.coding == "fixed" else huffman_ratio(n)


def _occupied(values: np.ndarray) -> np.ndarray:
    # bit-level test so -0.0 counts as a stored value
    return values.view(np.uint32) != 0


def pack(matrix: np.ndarray, pattern: NMPattern, coding: str = "huffman", mask: np.ndarray | None = None
         ) -> PackedSparseTensor:
    """Pack a matrix obeying ``pattern``; ``mask`` disambiguates kept entries that are exactly zero."""
    if coding not in CODINGS:
        raise ValueError(f"coding must be one of {CODINGS}")
    if not pattern.half:
        raise PatternError(f"packing supports n:2n patterns only, got {pattern}")
    x = np.ascontiguousarray(matrix, dtype=np.float32)
    if x.ndim != 2:
        raise DimensionError("pack expects a matrix")
    rows, cols = x.shape
    n, m = pattern.n, pattern.m
    if cols % m:
        raise DimensionError(f"row length {cols} not divisible by {m}")
    g = x.reshape(-1, m)
    occupied = _occupied(g)
    if mask is not None:
        keep = np.asarray(mask, dtype=bool).reshape(-1, m)
        if keep.shape != g.shape:
            raise DimensionError("mask shape does not match matrix")
        if np.any(occupied & ~keep):
            raise PatternError("matrix has nonzero entries outside the mask")
        if np.any(keep.sum(axis=1) != n):
            raise PatternError(f"mask does not keep exactly {n} per group")
    else:
        counts = occupied.sum(axis=1)
        if np.any(counts > n):
            bad = int(np.argmax(counts > n))
            raise PatternError(f"group {bad} holds {counts[bad]} nonzeros, more than {n}")
        keep = occupied.copy()
        short = np.flatnonzero(counts < n)
        for gi in short:
            need = n - counts[gi]
            free = np.flatnonzero(~keep[gi])[:need]
            keep[gi, free] = True
    weights = (1 << np.arange(m, dtype=np.int64))
    bitmask = (keep.astype(np.int64) * weights).sum(axis=1)
    symbols = _rank_lookup(n, m)[bitmask]
    values = g[keep].astype(np.float32)
    if coding == "fixed":
        width = fixed_bits(n)
        k = binom(m, n)
        codes = np.arange(k, dtype=np.int64)
        lens = np.full(k, width, dtype=np.int64)
        bits = encode_fixed_or_variable(symbols, codes, lens)
        code_lengths: list[int] = []
    else:
        table = huffman_table(n)
        bits = table.encode_bits(symbols)
        code_lengths = list(table.lengths)
    return PackedSparseTensor(
        pattern=pattern,
        shape=(rows, cols),
        values=values,
        symbols=symbols,
        coding=coding,
        code_lengths=code_lengths,
        bitstream=np.packbits(bits).tobytes(),
        bit_length=int(bits.size),
    )


def _decode_symbols(p: PackedSparseTensor) -> np.ndarray:
    n = p.pattern.n
    groups = p.shape[0] * p.shape[1] // p.pattern.m
    bits = np.unpackbits(np.frombuffer(p.bitstream, dtype=np.uint8))
    if p.coding == "fixed":
        width = fixed_bits(n)
        need = groups * width
        if bits.size < need:
            raise CorruptFileError("index stream too short")
        chunk = bits[:need].reshape(groups, width).astype(np.int64)
        syms = (chunk * (1 << np.arange(width - 1, -1, -1, dtype=np.int64))).sum(axis=1)
        if np.any(syms >= binom(2 * n, n)):
            raise CorruptFileError("index symbol out of range")
        return syms
    return HuffmanTable(p.code_lengths).decode_bits(bits, groups)


def unpack(p: PackedSparseTensor) -> np.ndarray:
    n, m = p.pattern.n, p.pattern.m
    symbols = _decode_symbols(p)
    positions = _position_table(n, m)[symbols]  # groups x n
    out = np.zeros((symbols.size, m), dtype=np.float32)
    np.put_along_axis(out, positions, p.values.reshape(-1, n), axis=1)
    return out.reshape(p.shape)


_HEADER = struct.Struct("<4sHBBIIB")


def to_bytes(p: PackedSparseTensor) -> bytes:
    rows, cols = p.shape
    parts = [
        _HEADER.pack(MAGIC, VERSION, p.pattern.n, p.pattern.m, rows, cols, CODINGS.index(p.coding)),
        struct.pack("<I", len(p.code_lengths)),
        bytes(p.code_lengths),
        p.values.astype("<f4").tobytes(),
        p.bitstream,
    ]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(raw: bytes) -> PackedSparseTensor:
    if len(raw) < _HEADER.size + 8:
        raise CorruptFileError("file too short")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptFileError("CRC mismatch")
    magic, version, n, m, rows, cols, coding = _HEADER.unpack_from(body, 0)
    if magic != MAGIC:
        raise CorruptFileError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CorruptFileError(f"unsupported version {version}")
    off = _HEADER.size
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    lengths = list(body[off : off + count])
    off += count
    n_values = rows * cols // 2
    values = np.frombuffer(body, dtype="<f4", count=n_values, offset=off).astype(np.float32)
    off += 4 * n_values
    stream = body[off:]
    pattern = NMPattern(n, m)
    coding_name = CODINGS[coding]
    packed = PackedSparseTensor(pattern, (rows, cols), values, np.empty(0, np.int64), coding_name,
                                lengths, stream, 0)
    packed.symbols = _decode_symbols(packed)
    if coding_name == "fixed":
        packed.bit_length = packed.symbols.size * fixed_bits(n)
    else:
        packed.bit_length = int(np.asarray(lengths, dtype=np.int64)[packed.symbols].sum())
    return packed
