"""Reference-anchor selection per plane.

The default criterion keeps the images whose frozen-encoder embedding sits
closest to the plane mean. Random, k-medoids and k-center-greedy baselines
share the same call shape so they can be swapped by name.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .encoder import Encoder
from .errors import ConfigError, DomainError, FormatError

ANCHOR_HEADER = ("path", "plane", "sigma2")
KMEDOIDS_MAX_ITER = 50


@dataclass
class AnchorScore:
    id: str
    plane: str
    embedding: np.ndarray
    sigma2: float

    def __post_init__(self) -> None:
        if not self.sigma2 >= 0.0:
            raise DomainError(f"sigma2 must be non-negative, got {self.sigma2}")


def sigma2_scores(embeddings: np.ndarray) -> np.ndarray:
    """Per-row ``||e - mean||^2 / d``."""
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] == 0:
        raise DomainError("need a non-empty n x d embedding matrix")
    return ((e - e.mean(axis=0)) ** 2).sum(axis=1) / e.shape[1]


def embed_all(encoder: Encoder, groups: Mapping[str, Sequence[tuple[str, np.ndarray]]]) -> list[AnchorScore]:
    """Embed every image and score it against its own plane's mean embedding."""
    if not groups:
        raise DomainError("no planes to embed")
    out: list[AnchorScore] = []
    for plane, items in groups.items():
        if not items:
            raise DomainError(f"plane {plane!r} has no images")
        emb = np.stack([encoder.embed(px) for _, px in items])
        for (name, _), e, s in zip(items, emb, sigma2_scores(emb)):
            out.append(AnchorScore(name, plane, e, float(s)))
    return out


def _k(k1: int, n: int) -> int:
    if k1 < 1:
        raise ConfigError(f"k1 must be >= 1, got {k1}")
    return min(k1, n)


def select_variance_spectrum(sigma2: Sequence[float], k1: int, seed: int = 0) -> list[int]:
    """Indices of the ``k1`` smallest scores, ascending, lowest index first on ties."""
    s = np.asarray(sigma2, dtype=np.float64)
    k = _k(k1, s.size)
    return [int(i) for i in np.lexsort((np.arange(s.size), s))[:k]]


def select_random(n: int, k1: int, seed: int = 0) -> list[int]:
    rng = np.random.default_rng(seed)
    return [int(i) for i in rng.choice(n, size=_k(k1, n), replace=False)]


def _distances(e: np.ndarray) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    sq = (e * e).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * e @ e.T, 0.0)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def kmedoids_cost(dist: np.ndarray, medoids: Sequence[int]) -> float:
    return float(dist[:, list(medoids)].min(axis=1).sum())


def select_kmedoids(embeddings: np.ndarray, k1: int, seed: int = 0,
                    history: list[float] | None = None) -> list[int]:
    """PAM swap search from a seeded random start.

    Each iteration applies the single medoid/non-medoid swap with the largest
    cost decrease; the search stops when no swap helps or after
    ``KMEDOIDS_MAX_ITER`` swaps. ``history`` receives the cost after each step.
    """
    dist = _distances(embeddings)
    n = dist.shape[0]
    k = _k(k1, n)
    medoids = sorted(int(i) for i in np.random.default_rng(seed).choice(n, size=k, replace=False))
    cost = kmedoids_cost(dist, medoids)
    if history is not None:
        history.append(cost)
    for _ in range(KMEDOIDS_MAX_ITER):
        best = (cost, -1, -1)
        chosen = set(medoids)
        for mi in range(k):
            for h in range(n):
                if h in chosen:
                    continue
                trial = medoids[:mi] + [h] + medoids[mi + 1:]
                c = kmedoids_cost(dist, trial)
                if c < best[0] - 1e-12:
                    best = (c, mi, h)
        if best[1] < 0:
            break
        cost = best[0]
        medoids[best[1]] = best[2]
        medoids.sort()
        if history is not None:
            history.append(cost)
    return medoids


def select_kcenter_greedy(embeddings: np.ndarray, k1: int, seed: int = 0) -> list[int]:
    """Farthest-first traversal starting from the point nearest the centroid.

    The traversal is deterministic; ``seed`` is accepted for a uniform call shape.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    dist = _distances(e)
    n = dist.shape[0]
    k = _k(k1, n)
    first = int(np.argmin(((e - e.mean(axis=0)) ** 2).sum(axis=1)))
    chosen = [first]
    nearest = dist[first].copy()
    while len(chosen) < k:
        nearest[chosen] = -1.0
        nxt = int(np.argmax(nearest))
        chosen.append(nxt)
        nearest = np.minimum(nearest, dist[nxt])
    return chosen


STRATEGIES = ("variance", "random", "kmedoids", "kcenter")


def select(strategy: str, scores: Sequence[AnchorScore], k1: int, seed: int = 0) -> list[int]:
    """Dispatch by strategy name on one plane's scores; returns indices into ``scores``."""
    if not scores:
        raise DomainError("cannot select anchors from an empty plane")
    pick: dict[str, Callable[[], list[int]]] = {
        "variance": lambda: select_variance_spectrum([s.sigma2 for s in scores], k1, seed),
        "random": lambda: select_random(len(scores), k1, seed),
        "kmedoids": lambda: select_kmedoids(np.stack([s.embedding for s in scores]), k1, seed),
        "kcenter": lambda: select_kcenter_greedy(np.stack([s.embedding for s in scores]), k1, seed),
    }
    if strategy not in pick:
        raise ConfigError(f"unknown anchor strategy {strategy!r}; expected one of {STRATEGIES}")
    return pick[strategy]()


def select_per_plane(strategy: str, scores: Sequence[AnchorScore], k1: int, seed: int = 0) -> list[AnchorScore]:
    by_plane: dict[str, list[AnchorScore]] = {}
    for s in scores:
        by_plane.setdefault(s.plane, []).append(s)
    out = []
    for plane in sorted(by_plane):
        items = by_plane[plane]
        out += [items[i] for i in select(strategy, items, k1, seed)]
    return out


def write_anchor_csv(path: str | Path, anchors: Sequence[AnchorScore]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ANCHOR_HEADER)
        for a in anchors:
            w.writerow([a.id, a.plane, repr(float(a.sigma2))])


def read_anchor_csv(path: str | Path) -> list[tuple[str, str, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != ANCHOR_HEADER:
        raise FormatError(f"{path}: expected header {','.join(ANCHOR_HEADER)}")
    try:
        return [(r[0], r[1], float(r[2])) for r in rows[1:] if r]
    except (IndexError, ValueError) as exc:
        raise FormatError(f"{path}: malformed anchor row") from exc
