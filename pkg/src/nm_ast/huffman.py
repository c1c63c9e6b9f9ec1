"""Deterministic canonical Huffman coding."""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from fractions import Fraction

import numpy as np


def code_lengths(weights) -> list[int]:
    """Huffman code lengths; ties merge the lowest-index nodes first.

    Leaves are indexed by symbol, internal nodes by ``len(weights) + k`` for
    the k-th merge, so the resulting table is reproducible byte for byte.
    A single symbol gets a 1-bit code.
    """
    k = len(weights)
    if k == 0:
        return []
    if k == 1:
        return [1]
    heap = [(w, i) for i, w in enumerate(weights)]
    heapq.heapify(heap)
    parent: dict[int, int] = {}
    nxt = k
    while len(heap) > 1:
        w1, a = heapq.heappop(heap)
        w2, b = heapq.heappop(heap)
        parent[a] = parent[b] = nxt
        heapq.heappush(heap, (w1 + w2, nxt))
        nxt += 1
    root = heap[0][1]
    depth = {root: 0}
    for node in range(nxt - 1, -1, -1):
        if node != root:
            depth[node] = depth[parent[node]] + 1
    return [depth[i] for i in range(k)]


def equiprobable_histogram(k: int) -> dict[int, int]:
    """Code-length histogram of Huffman over ``k`` equal weights, in closed form.

    With ``L = floor(log2 k)``, ``2 (k - 2^L)`` symbols sit at depth ``L + 1``
    and the rest at depth ``L``. Works for arbitrarily large ``k``.
    """
    if k < 1:
        raise ValueError("need at least one symbol")
    if k == 1:
        return {1: 1}
    low = k.bit_length() - 1
    deep = 2 * (k - (1 << low))
    hist = {}
    if k - deep:
        hist[low] = k - deep
    if deep:
        hist[low + 1] = deep
    return hist


def mean_length(hist: dict[int, int]) -> Fraction:
    total = sum(hist.values())
    return Fraction(sum(length * c for length, c in hist.items()), total)


def canonical_codes(lengths) -> list[tuple[int, int]]:
    """``(code, length)`` per symbol, assigned in (length, symbol) order."""
    order = sorted(range(len(lengths)), key=lambda s: (lengths[s], s))
    codes = [(0, 0)] * len(lengths)
    code = 0
    prev = 0
    for s in order:
        length = lengths[s]
        code <<= length - prev
        codes[s] = (code, length)
        code += 1
        prev = length
    return codes


def kraft_sum(lengths) -> Fraction:
    return sum((Fraction(1, 1 << length) for length in lengths), Fraction(0))


@dataclass
class HuffmanTable:
    lengths: list[int]

    def __post_init__(self):
        self.codes = canonical_codes(self.lengths)
        self._code_arr = np.array([c for c, _ in self.codes], dtype=np.int64)
        self._len_arr = np.array(self.lengths, dtype=np.int64)
        self._decode = {(length, code): s for s, (code, length) in enumerate(self.codes)}
        self.max_length = max(self.lengths) if self.lengths else 0

    @classmethod
    def equiprobable(cls, k: int) -> "HuffmanTable":
        return cls(code_lengths([1] * k))

    def encode_bits(self, symbols: np.ndarray) -> np.ndarray:
        """Concatenated codes as a 0/1 ``uint8`` array, MSB of each code first."""
        return encode_fixed_or_variable(np.asarray(symbols), self._code_arr, self._len_arr)

    def decode_bits(self, bits: np.ndarray, count: int) -> np.ndarray:
        out = np.empty(count, dtype=np.int64)
        pos = 0
        bits = bits.tolist()
        lookup = self._decode
        for i in range(count):
            code = 0
            length = 0
            while True:
                code = (code << 1) | bits[pos]
                pos += 1
                length += 1
                s = lookup.get((length, code))
                if s is not None:
                    out[i] = s
                    break
                if length > self.max_length:
                    raise ValueError("invalid Huffman bitstream")
        return out


def encode_fixed_or_variable(symbols: np.ndarray, codes: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    lens = lengths[symbols]
    vals = codes[symbols]
    total = int(lens.sum())
    bits = np.zeros(total, dtype=np.uint8)
    if total == 0:
        return bits
    offsets = np.cumsum(lens) - lens
    for j in range(int(lens.max())):
        sel = lens > j
        shift = lens[sel] - 1 - j
        bits[offsets[sel] + j] = (vals[sel] >> shift) & 1
    return bits
