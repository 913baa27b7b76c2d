"""Independent reference computations used by several test modules."""

from __future__ import annotations

from fractions import Fraction

import numpy as np
from mpmath import expm1, matrix, mp, mpf


def ring_enumeration(n: int) -> list[Fraction]:
    """Fraction of k-subsets of an n-ring with no two cyclically adjacent
    members, for every k, by enumerating all 2**n bitmasks.
    """
    full = (1 << n) - 1
    masks = np.arange(1 << n, dtype=np.uint32)
    rotated = ((masks << 1) | (masks >> (n - 1))) & full
    ok = (masks & rotated) == 0
    popcount = np.zeros(masks.shape, dtype=np.int64)
    for bit in range(n):
        popcount += (masks >> bit) & 1
    total = np.bincount(popcount, minlength=n + 1)
    good = np.bincount(popcount[ok], minlength=n + 1)
    out = []
    for k in range(n + 1):
        # a single failure is always recoverable, even when n == 1 wraps onto itself
        out.append(Fraction(1) if k <= 1 else Fraction(int(good[k]), int(total[k])))
    return out


def transfer_matrix_recovery(n: int, hours: float, gpu_mtbf: float, dps: int = 40) -> float:
    """P(no two adjacent failures on an n-ring) for iid host failures, via the
    trace of the 2-state transfer matrix; valid for n >= 2.
    """
    mp.dps = dps
    p = -expm1(-mpf(8) * hours / gpu_mtbf)
    q = 1 - p
    m = matrix([[q, q], [p, 0]]) ** n
    return float(m[0, 0] + m[1, 1])
