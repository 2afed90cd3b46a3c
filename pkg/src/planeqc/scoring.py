"""Calibrated registrability score and the accept/reject decision."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .encoder import LevelFeatures
from .errors import CalibrationError, ScoringError, StaleCacheError, StateError
from .model import TERMS, QCModel
from .numerics import load_tensors, no_grad, save_tensors

SCORE_HEADER = ("path", "plane", "Q", "accepted", "sim_raw", "ncc_raw", "smooth_raw",
                "sim_norm", "ncc_norm", "smooth_norm")
DEFAULT_WEIGHTS = {t: 1.0 for t in TERMS}


class CalibrationStats:
    """Running per-plane, per-term minima and maxima; read-only once frozen."""

    def __init__(self) -> None:
        self.ranges: dict[str, dict[str, list[float]]] = {}
        self.frozen = False

    def _check_open(self) -> None:
        if self.frozen:
            raise StateError("calibration stats are frozen")

    def update(self, plane: str, term: str, value: float) -> None:
        self._check_open()
        if term not in TERMS:
            raise CalibrationError(f"unknown term {term!r}")
        v = float(value)
        slot = self.ranges.setdefault(plane, {}).get(term)
        if slot is None:
            self.ranges[plane][term] = [v, v]
        else:
            slot[0] = min(slot[0], v)
            slot[1] = max(slot[1], v)

    def merge(self, other: CalibrationStats) -> CalibrationStats:
        self._check_open()
        for plane, terms in other.ranges.items():
            for term, (lo, hi) in terms.items():
                self.update(plane, term, lo)
                self.update(plane, term, hi)
        return self

    def freeze(self) -> CalibrationStats:
        for plane, terms in self.ranges.items():
            missing = set(TERMS) - set(terms)
            if missing:
                raise CalibrationError(f"plane {plane!r} lacks terms {sorted(missing)}")
        self.frozen = True
        return self

    def range(self, plane: str, term: str) -> tuple[float, float]:
        try:
            lo, hi = self.ranges[plane][term]
        except KeyError as exc:
            raise CalibrationError(f"no calibration for plane {plane!r} term {term!r}") from exc
        return lo, hi

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for plane in sorted(self.ranges):
            for term in TERMS:
                lo, hi = self.range(plane, term)
                out[f"calib.{plane}.{term}.min"] = np.array(lo)
                out[f"calib.{plane}.{term}.max"] = np.array(hi)
        return out

    def save(self, path: str | Path) -> None:
        if not self.frozen:
            raise StateError("only frozen stats can be saved")
        save_tensors(path, self.to_tensors())

    @classmethod
    def load(cls, path: str | Path) -> CalibrationStats:
        stats = cls()
        for name, arr in load_tensors(path).items():
            _, rest = name.split(".", 1)
            plane, term, end = rest.rsplit(".", 2)
            slot = stats.ranges.setdefault(plane, {}).setdefault(term, [0.0, 0.0])
            slot[0 if end == "min" else 1] = float(arr)
        return stats.freeze()


def phi(value: float, term: str, plane: str, stats: CalibrationStats) -> float:
    """Min-max normalised value clamped to [0, 1]; a zero-width window maps to 0."""
    if not stats.frozen:
        raise StateError("calibration stats must be frozen before normalising")
    lo, hi = stats.range(plane, term)
    if hi <= lo:
        return 0.0
    return min(1.0, max(0.0, (float(value) - lo) / (hi - lo)))


@dataclass
class CachedFeatures:
    features: LevelFeatures
    pooled: list[np.ndarray]


class AnchorCache:
    """Anchor features computed once per model checkpoint."""

    def __init__(self, fingerprint: str):
        self.fingerprint = fingerprint
        self.entries: dict[str, CachedFeatures] = {}

    @classmethod
    def build(cls, model: QCModel, anchors: Mapping[str, np.ndarray]) -> AnchorCache:
        cache = cls(model.fingerprint())
        for name, px in anchors.items():
            cache.entries[name] = _features(model, px)
        return cache

    def check(self, model: QCModel) -> None:
        if model.fingerprint() != self.fingerprint:
            raise StaleCacheError("anchor cache was built for a different checkpoint")

    def get(self, name: str) -> CachedFeatures:
        return self.entries[name]


def _features(model: QCModel, pixels: np.ndarray) -> CachedFeatures:
    with no_grad():
        bb = model.backbone(pixels)
        return CachedFeatures(model.infer_features(bb), [m.data.mean(axis=(1, 2)) for m in bb])


def pair_raw(model: QCModel, anchor: LevelFeatures, query: LevelFeatures) -> dict[str, float]:
    with no_grad():
        return model.pair_terms(anchor, query).values()


def calibrate(model: QCModel, images: Mapping[str, Sequence[np.ndarray]],
              anchors: Mapping[str, Mapping[str, np.ndarray]], cache: AnchorCache | None = None) -> CalibrationStats:
    """Register every image against every anchor of its plane and freeze the term ranges."""
    stats = CalibrationStats()
    if cache is None:
        cache = AnchorCache.build(model, {n: px for group in anchors.values() for n, px in group.items()})
    cache.check(model)
    for plane, group in images.items():
        if not group:
            raise CalibrationError(f"plane {plane!r} has no calibration images")
        names = list(anchors.get(plane, {}))
        if not names:
            raise CalibrationError(f"plane {plane!r} has no anchors")
        for px in group:
            q = _features(model, px).features
            for name in names:
                for term, v in pair_raw(model, cache.get(name).features, q).items():
                    stats.update(plane, term, v)
    return stats.freeze()


@dataclass
class QualityReport:
    query: str
    plane: str
    raw: list[dict[str, float]]
    norm: list[dict[str, float]]
    Q: float
    tau: float
    accepted: bool = field(init=False)

    def __post_init__(self) -> None:
        self.accepted = decide(self, self.tau)

    def mean_terms(self, which: str) -> dict[str, float]:
        rows = self.raw if which == "raw" else self.norm
        return {t: math.fsum(r[t] for r in rows) / len(rows) for t in TERMS}

    def csv_row(self) -> list[str]:
        raw, norm = self.mean_terms("raw"), self.mean_terms("norm")
        return ([self.query, self.plane, repr(self.Q), "1" if self.accepted else "0"]
                + [repr(raw[t]) for t in TERMS] + [repr(norm[t]) for t in TERMS])


def decide(report: QualityReport, tau: float = 0.5) -> bool:
    return report.Q > tau


def combine(norm_rows: Sequence[Mapping[str, float]], weights: Mapping[str, float] = DEFAULT_WEIGHTS,
            literal: bool = False) -> float:
    """``1 - mean over anchors of the weighted term sum``, divided by the weight total unless ``literal``."""
    if not norm_rows:
        raise ScoringError("no anchors to score against")
    wsum = math.fsum(weights[t] for t in TERMS)
    if not literal and wsum <= 0:
        raise ScoringError("term weights must sum to a positive value")
    per_anchor = []
    for row in norm_rows:
        s = math.fsum(weights[t] * row[t] for t in TERMS)
        per_anchor.append(s if literal else s / wsum)
    return 1.0 - math.fsum(per_anchor) / len(per_anchor)


def quality_score(model: QCModel, query: np.ndarray, plane: str, anchors: Mapping[str, np.ndarray],
                  stats: CalibrationStats, weights: Mapping[str, float] = DEFAULT_WEIGHTS,
                  tau: float = 0.5, cache: AnchorCache | None = None, literal: bool = False,
                  name: str = "") -> QualityReport:
    if not anchors:
        raise ScoringError(f"plane {plane!r} has no anchors")
    if not stats.frozen:
        raise StateError("calibration stats must be frozen before scoring")
    if cache is not None:
        cache.check(model)
    q = _features(model, query).features
    raw, norm = [], []
    for anchor_name, px in anchors.items():
        feats = cache.get(anchor_name).features if cache is not None else _features(model, px).features
        r = pair_raw(model, feats, q)
        raw.append(r)
        norm.append({t: phi(r[t], t, plane, stats) for t in TERMS})
    return QualityReport(name, plane, raw, norm, combine(norm, weights, literal), tau)


def write_scores(path: str | Path, reports: Sequence[QualityReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_HEADER)
        for r in reports:
            w.writerow(r.csv_row())
