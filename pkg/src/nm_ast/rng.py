"""Named random streams.

Every consumer of randomness asks for a stream by name. A stream is a Philox
(counter-based) generator keyed by ``(seed, crc32(name))``, so the values a
tensor receives never depend on how many other tensors were drawn first.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, key])
    return np.random.Generator(np.random.Philox(ss))
