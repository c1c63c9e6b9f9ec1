"""Independent reference implementations shared by the unit and acceptance tests."""

import itertools
from fractions import Fraction

import numpy as np


def oracle_mask(w: np.ndarray, pattern) -> np.ndarray:
    """Exhaustive keep-set search: max exact sum of |w|, then lexicographically first set."""
    rows, cols = w.shape
    out = np.zeros(w.shape, dtype=bool)
    combos = list(itertools.combinations(range(pattern.m), pattern.n))
    for r in range(rows):
        for g in range(cols // pattern.m):
            grp = [Fraction(float(abs(v))) for v in w[r, g * pattern.m : (g + 1) * pattern.m]]
            best = max(combos, key=lambda c: (sum(grp[i] for i in c), [-i for i in c]))
            for i in best:
                out[r, g * pattern.m + i] = True
    return out


def slorb_group_sums(w, mask, s, k):
    """Per-row, per-group sums of ``mask*w + S X`` and of ``w`` by explicit loops."""
    rows, d = w.shape
    eff, ref = np.zeros((rows, d // k)), np.zeros((rows, d // k))
    for r in range(rows):
        for g in range(d // k):
            for c in range(g * k, (g + 1) * k):
                eff[r, g] += (w[r, c] if mask[r, c] else 0.0) + s[r, g]
                ref[r, g] += w[r, c]
    return eff, ref


def annealed_lambda(t, alpha, t0):
    return alpha * t if t <= t0 else alpha * t0
