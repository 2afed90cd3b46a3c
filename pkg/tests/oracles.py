"""Independent reference implementations shared by unit and acceptance tests.

Each oracle computes its answer the slow, obvious way so it shares no code
path with the package.
"""

from __future__ import annotations

import math
from itertools import combinations

import numpy as np


def brute_force_subset(sigma2, k):
    """Lowest-sum subset by exhaustive enumeration; lexicographically smallest on ties."""
    best = min(combinations(range(len(sigma2)), k), key=lambda s: (sum(sigma2[i] for i in s), s))
    return sorted(best)


def naive_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
    vx = sum((a - mx) ** 2 for a in x)
    vy = sum((b - my) ** 2 for b in y)
    return cov / math.sqrt(vx * vy)


def naive_ranks(x):
    # rank = 1 + number smaller + (ties - 1) / 2
    return [1 + sum(b < a for b in x) + (sum(b == a for b in x) - 1) / 2 for a in x]


def naive_spearman(x, y):
    return naive_pearson(naive_ranks(x), naive_ranks(y))


def sorted_quantile_mask(t: np.ndarray, n_planes: int) -> np.ndarray:
    """Linear-interpolation quantile computed from a sort, independent of np.quantile."""
    flat = np.sort(t.ravel())
    pos = (flat.size - 1) * (n_planes - 1) / n_planes
    lo = int(np.floor(pos))
    hi = min(lo + 1, flat.size - 1)
    q = flat[lo] + (pos - lo) * (flat[hi] - flat[lo])
    return (t > q).astype(np.uint8)


def rank_one_sum(a: np.ndarray, b: np.ndarray, scale: float) -> np.ndarray:
    """``scale * sum_k outer(b[:, k], a[k])`` accumulated term by term."""
    out = np.zeros((b.shape[0], a.shape[1]))
    for k in range(a.shape[0]):
        out += np.outer(b[:, k], a[k])
    return scale * out
