"""Rank and linear correlation, paired t-test, and the deformation-severity sweep."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import betainc
from scipy.stats import rankdata

from .errors import DegenerateError, DomainError
from .imaging import Image, deform
from .model import QCModel
from .scoring import AnchorCache, CalibrationStats, quality_score

SWEEP_HEADER = ("image", "kind", "severity", "Q")
DEFAULT_LEVELS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
KINDS = ("rigid", "nonrigid")


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(x, dtype=np.float64).ravel()
    b = np.asarray(y, dtype=np.float64).ravel()
    if a.size != b.size:
        raise DomainError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 3:
        raise DomainError(f"correlation needs at least 3 points, got {a.size}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise DomainError("correlation inputs must be finite")
    return a, b


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    da, db = a - a.mean(), b - b.mean()
    sa, sb = math.sqrt(float(da @ da)), math.sqrt(float(db @ db))
    if sa == 0.0 or sb == 0.0:
        raise DomainError("correlation is undefined for a constant input")
    return max(-1.0, min(1.0, float(da @ db) / (sa * sb)))


def plcc(x, y) -> float:
    return _pearson(*_pair(x, y))


def srcc(x, y) -> float:
    """Pearson correlation of average ranks."""
    a, b = _pair(x, y)
    return _pearson(rankdata(a, method="average"), rankdata(b, method="average"))


def t_sf_two_sided(t: float, dof: int) -> float:
    """Two-sided tail probability of Student's t via the regularised incomplete beta function."""
    return float(betainc(dof / 2.0, 0.5, dof / (dof + t * t)))


def paired_ttest(a, b) -> tuple[float, float]:
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    if x.size != y.size:
        raise DomainError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise DomainError("paired t-test needs at least 2 pairs")
    d = x - y
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise DegenerateError("differences have zero variance; t is undefined")
    t = float(d.mean()) / (sd / math.sqrt(d.size))
    return t, t_sf_two_sided(t, d.size - 1)


@dataclass
class EvalMetrics:
    srcc: float
    plcc: float
    t: float | None
    p: float | None
    n: int

    def __post_init__(self) -> None:
        if abs(self.srcc) > 1 or abs(self.plcc) > 1:
            raise DomainError("correlations must lie in [-1, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def evaluate(pred, target, baseline=None) -> EvalMetrics:
    """Correlations of ``pred`` against ``target``; a paired t-test of absolute errors when ``baseline`` is given."""
    t = p = None
    if baseline is not None:
        tgt = np.asarray(target, dtype=np.float64)
        t, p = paired_ttest(np.abs(np.asarray(pred) - tgt), np.abs(np.asarray(baseline) - tgt))
    return EvalMetrics(srcc(pred, target), plcc(pred, target), t, p, len(pred))


@dataclass
class SweepPoint:
    image: str
    kind: str
    severity: float
    Q: float


def severity_sweep(model: QCModel, stats: CalibrationStats, images: Sequence[Image],
                   anchors: Mapping[str, Mapping[str, np.ndarray]], kinds: Sequence[str] = KINDS,
                   levels: Sequence[float] = DEFAULT_LEVELS, seed: int = 0,
                   cache: AnchorCache | None = None) -> tuple[list[SweepPoint], dict[str, float]]:
    """Deform each image at every level, score it, and report SRCC(severity, Q) per kind.

    The deformation seed depends on (seed, image, kind) only, so the random
    direction of a deformation stays fixed while its magnitude grows.
    """
    if cache is None:
        cache = AnchorCache.build(model, {n: px for g in anchors.values() for n, px in g.items()})
    points: list[SweepPoint] = []
    for ki, kind in enumerate(kinds):
        for ii, img in enumerate(images):
            plane = img.plane.name if img.plane is not None else ""
            for s in levels:
                moved = deform(img, kind, s, [seed, ii, ki])
                rep = quality_score(model, moved.pixels, plane, anchors[plane], stats, cache=cache, name=img.name)
                points.append(SweepPoint(img.name or f"img{ii}", kind, float(s), rep.Q))
    per_kind = {}
    for kind in kinds:
        sel = [p for p in points if p.kind == kind]
        try:
            per_kind[kind] = srcc([p.severity for p in sel], [p.Q for p in sel])
        except DomainError:
            per_kind[kind] = float("nan")
    return points, per_kind


def write_sweep(path: str | Path, points: Sequence[SweepPoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for p in points:
            w.writerow([p.image, p.kind, repr(p.severity), repr(p.Q)])
