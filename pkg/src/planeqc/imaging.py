"""Images, PGM I/O, augmentation, graded deformations and the synthetic corpus.

Pixel geometry uses ``x`` = column and ``y`` = row (y grows downward). A
rigid transform is stored as a 3x3 forward map in pixel coordinates; warping
pulls every output pixel from ``inverse(forward) @ p`` with bilinear
interpolation and zero fill outside the frame.
"""

from __future__ import annotations

import csv
import math
import os
import re
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DomainError, FormatError

MIN_SIDE = 32
SPLITS = ("pool", "train", "query")
MANIFEST = "manifest.csv"
MANIFEST_HEADER = ("path", "plane", "split", "severity", "score")


@dataclass(frozen=True)
class PlaneLabel:
    id: int
    name: str


@dataclass
class Image:
    pixels: np.ndarray
    plane: PlaneLabel | None = None
    severity: float | None = None
    score: float | None = None
    name: str = ""
    transform: np.ndarray | None = None

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or min(px.shape) < MIN_SIDE:
            raise DomainError(f"image must be 2-D with sides >= {MIN_SIDE}, got {px.shape}")
        if px.min() < 0.0 or px.max() > 1.0:
            raise DomainError("pixels must lie in [0, 1]")
        self.pixels = px

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


# -- PGM ------------------------------------------------------------------

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def load_pgm(path: str | os.PathLike, plane: PlaneLabel | None = None) -> Image:
    buf = Path(path).read_bytes()
    if not buf.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM (P5)")
    pos = 2
    fields = []
    for _ in range(3):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise FormatError(f"{path}: malformed PGM header")
        fields.append(m.group(1))
        pos = m.end()
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError:
        raise FormatError(f"{path}: non-numeric PGM header field") from None
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after PGM header")
    pos += 1
    payload = buf[pos:]
    if len(payload) < w * h:
        raise FormatError(f"{path}: truncated payload ({len(payload)} of {w * h} bytes)")
    px = np.frombuffer(payload[:w * h], dtype=np.uint8).reshape(h, w)
    return Image(px.astype(np.float64) / 255.0, plane=plane, name=str(path))


def encode_pgm(img: Image) -> bytes:
    h, w = img.shape
    q = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def save_pgm(img: Image, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_pgm(img))


# -- geometry -------------------------------------------------------------

def rigid_matrix(shape: tuple[int, int], angle_deg: float = 0.0, tx: float = 0.0, ty: float = 0.0,
                 scale: float = 1.0) -> np.ndarray:
    """Forward 3x3 map: rotate about the centre, translate (fractions of size), then scale."""
    h, w = shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    a = math.radians(angle_deg)
    rot = np.array([[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0], [0.0, 0.0, 1.0]])
    shift = np.array([[1.0, 0.0, tx * w], [0.0, 1.0, ty * h], [0.0, 0.0, 1.0]])
    zoom = np.diag([scale, scale, 1.0])
    to_origin = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
    back = np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])
    return back @ zoom @ shift @ rot @ to_origin


def warp_affine(pixels: np.ndarray, forward: np.ndarray) -> np.ndarray:
    if np.array_equal(forward, np.eye(3)):
        return pixels.copy()
    h, w = pixels.shape
    inv = np.linalg.inv(forward)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    src_x = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    src_y = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    out = ndimage.map_coordinates(pixels, [src_y, src_x], order=1, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)


def warp_displacement(pixels: np.ndarray, field: np.ndarray) -> np.ndarray:
    """``out(p) = in(p + d(p))`` for a ``(2, H, W)`` field of (dy, dx) in pixels."""
    if not field.any():
        return pixels.copy()
    h, w = pixels.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    out = ndimage.map_coordinates(pixels, [ys + field[0], xs + field[1]], order=1, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)


def affine_displacement(shape: tuple[int, int], forward: np.ndarray) -> np.ndarray:
    """Pull-back displacement field (dy, dx) equivalent to :func:`warp_affine`."""
    h, w = shape
    inv = np.linalg.inv(forward)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    src_x = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    src_y = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    return np.stack([src_y - ys, src_x - xs])


# -- augmentation ---------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    contrast: tuple[float, float] = (0.8, 1.2)
    rotation_deg: float = 20.0
    translation: float = 0.2
    scale: tuple[float, float] = (0.8, 1.2)
    noise_std: float = 0.03

    @classmethod
    def identity(cls) -> AugmentConfig:
        return cls(contrast=(1.0, 1.0), rotation_deg=0.0, translation=0.0, scale=(1.0, 1.0), noise_std=0.0)


def augment(img: Image, cfg: AugmentConfig, seed: int | Sequence[int]) -> Image:
    """Contrast, rotation, translation, scale, Gaussian noise, in that order."""
    rng = np.random.default_rng(seed)
    c = rng.uniform(*cfg.contrast)
    angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
    tx, ty = rng.uniform(-cfg.translation, cfg.translation, size=2)
    s = rng.uniform(*cfg.scale)
    noise = rng.normal(0.0, 1.0, size=img.shape)

    px = img.pixels
    if c != 1.0:
        mean = px.mean()
        px = np.clip((px - mean) * c + mean, 0.0, 1.0)
    px = warp_affine(px, rigid_matrix(img.shape, angle, tx, ty, s))
    if cfg.noise_std > 0:
        px = np.clip(px + cfg.noise_std * noise, 0.0, 1.0)
    return replace(img, pixels=px, transform=None)


# -- deformations ---------------------------------------------------------

RIGID_MAX_ANGLE = 45.0
RIGID_MAX_SHIFT = 0.30
RIGID_MAX_ZOOM = 0.40
WARP_MAX_AMPLITUDE = 0.25


def rigid_params(severity: float, seed) -> tuple[float, float, float, float]:
    """(angle_deg, tx, ty, scale) at full magnitude for ``severity``; direction from ``seed``."""
    rng = np.random.default_rng(seed)
    angle_sign = rng.choice((-1.0, 1.0))
    direction = rng.uniform(0.0, 2.0 * math.pi)
    zoom_sign = rng.choice((-1.0, 1.0))
    shift = RIGID_MAX_SHIFT * severity
    return (
        float(angle_sign * RIGID_MAX_ANGLE * severity),
        float(shift * math.cos(direction)),
        float(shift * math.sin(direction)),
        float(1.0 + zoom_sign * RIGID_MAX_ZOOM * severity),
    )


def sinusoidal_field(shape: tuple[int, int], severity: float, seed) -> np.ndarray:
    """Pull-back field (dy, dx) with amplitude ``0.25 * severity * W`` and 2-4 periods."""
    h, w = shape
    rng = np.random.default_rng(seed)
    kx, ky = rng.integers(2, 5, size=2)
    px, py = rng.uniform(0.0, 2.0 * math.pi, size=2)
    amp = WARP_MAX_AMPLITUDE * severity * w
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = amp * np.sin(2.0 * math.pi * ky * ys / h + py)
    dy = amp * np.sin(2.0 * math.pi * kx * xs / w + px)
    return np.stack([dy, dx])


def _check_severity(severity: float) -> None:
    if not 0.0 <= severity <= 1.0 or math.isnan(severity):
        raise DomainError(f"severity must be in [0, 1], got {severity}")


def deform(img: Image, kind: str, severity: float, seed) -> Image:
    _check_severity(severity)
    if kind == "rigid":
        forward = rigid_matrix(img.shape, *rigid_params(severity, seed)) if severity > 0 else np.eye(3)
        px = warp_affine(img.pixels, forward)
        return replace(img, pixels=px, severity=float(severity), transform=forward)
    if kind == "nonrigid":
        px = warp_displacement(img.pixels, sinusoidal_field(img.shape, severity, seed))
        return replace(img, pixels=px, severity=float(severity), transform=None)
    raise DomainError(f"unknown deformation kind {kind!r}")


def displacement_magnitude(shape: tuple[int, int], kind: str, severity: float, seed) -> float:
    """Mean per-pixel displacement (pixels) of the warp :func:`deform` would apply."""
    _check_severity(severity)
    if kind == "rigid":
        if severity == 0:
            return 0.0
        fld = affine_displacement(shape, rigid_matrix(shape, *rigid_params(severity, seed)))
    elif kind == "nonrigid":
        fld = sinusoidal_field(shape, severity, seed)
    else:
        raise DomainError(f"unknown deformation kind {kind!r}")
    return float(np.hypot(fld[0], fld[1]).mean())


# -- synthetic corpus -----------------------------------------------------

SPECKLE_SIGMA = 0.25
_RAYLEIGH_MEAN = SPECKLE_SIGMA * math.sqrt(math.pi / 2.0)


@dataclass(frozen=True)
class Blob:
    cx: float
    cy: float
    rx: float
    ry: float
    angle: float
    level: float
    crescent: bool


@dataclass(frozen=True)
class CorpusSpec:
    n_planes: int = 2
    size: int = 128
    n_pool: int = 40
    k1: int = 20
    k2: int = 100
    n_query_pristine: int = 10
    n_query_degraded: int = 30
    pool_degraded_frac: float = 0.3
    plane_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.n_planes < 1:
            raise ConfigError("n_planes must be >= 1")
        if self.size < MIN_SIDE or self.size % 8:
            raise ConfigError(f"size must be a multiple of 8 and >= {MIN_SIDE}, got {self.size}")
        if self.k1 < 1 or self.k1 * 5 > self.k2:
            raise ConfigError(f"k1={self.k1} violates k1 <= k2/5 with k2={self.k2}")
        if self.n_pool < self.k1:
            raise ConfigError(f"anchor pool n_pool={self.n_pool} smaller than k1={self.k1}")
        if self.plane_names and len(self.plane_names) != self.n_planes:
            raise ConfigError("plane_names length must equal n_planes")
        if not 0.0 <= self.pool_degraded_frac <= 1.0:
            raise ConfigError("pool_degraded_frac must be in [0, 1]")

    def planes(self) -> list[PlaneLabel]:
        names = self.plane_names or tuple(f"plane{i}" for i in range(self.n_planes))
        return [PlaneLabel(i, n) for i, n in enumerate(names)]


@dataclass
class DatasetSplit:
    planes: list[PlaneLabel]
    pool: dict[int, list[Image]]
    train: dict[int, list[Image]]
    query: dict[int, list[Image]]
    k1: int
    k2: int
    anchors: dict[int, list[Image]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.k1 * 5 > self.k2:
            raise ConfigError(f"k1={self.k1} violates k1 <= k2/5 with k2={self.k2}")
        seen: set[int] = set()
        for group in (self.pool, self.train, self.query):
            for imgs in group.values():
                for im in imgs:
                    if id(im) in seen:
                        raise ConfigError("dataset splits must be disjoint")
                    seen.add(id(im))

    def plane(self, pid: int) -> PlaneLabel:
        return self.planes[pid]


MIN_ARCHETYPE_GAP = 0.06


def _sample_layout(rng: np.random.Generator) -> tuple[Blob, ...]:
    blobs = []
    for _ in range(int(rng.integers(3, 6))):
        blobs.append(Blob(
            cx=float(rng.uniform(0.28, 0.72)),
            cy=float(rng.uniform(0.30, 0.82)),
            rx=float(rng.uniform(0.09, 0.20)),
            ry=float(rng.uniform(0.07, 0.15)),
            angle=float(rng.uniform(0.0, math.pi)),
            level=float(rng.choice((0.05, 0.85))),
            crescent=bool(rng.random() < 0.35),
        ))
    return tuple(blobs)


@lru_cache(maxsize=256)
def _archetype(plane_id: int, seed: int) -> tuple[Blob, ...]:
    # Layouts closer than MIN_ARCHETYPE_GAP (mean abs diff at 64 px) to a
    # lower-numbered plane are redrawn, so planes are always distinguishable.
    rng = np.random.default_rng([seed, 7919, plane_id])
    others = [render_template(_archetype(q, seed), 64) for q in range(plane_id)]
    while True:
        blobs = _sample_layout(rng)
        mine = render_template(blobs, 64)
        if all(np.abs(mine - o).mean() > MIN_ARCHETYPE_GAP for o in others):
            return blobs


def plane_archetype(plane_id: int, seed: int) -> list[Blob]:
    return list(_archetype(int(plane_id), int(seed)))


def _sector_mask(size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / size
    dx, dy = xs - 0.5, ys + 0.05
    r = np.hypot(dx, dy)
    theta = np.arctan2(dx, dy)
    return ((r > 0.15) & (r < 1.0) & (np.abs(theta) < math.radians(42))).astype(np.float64)


def _ellipse(xs, ys, b: Blob, grow: float = 1.0, dx: float = 0.0, dy: float = 0.0) -> np.ndarray:
    ca, sa = math.cos(b.angle), math.sin(b.angle)
    u = (xs - b.cx - dx) * ca + (ys - b.cy - dy) * sa
    v = -(xs - b.cx - dx) * sa + (ys - b.cy - dy) * ca
    d = np.sqrt((u / (b.rx * grow)) ** 2 + (v / (b.ry * grow)) ** 2)
    return 1.0 / (1.0 + np.exp((d - 1.0) * 12.0))


def render_template(blobs: Iterable[Blob], size: int, tissue: float = 0.45) -> np.ndarray:
    """Noise-free intensity layout: sector of tissue with blob structures painted in."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.full((size, size), tissue)
    for b in blobs:
        m = _ellipse(xs, ys, b)
        if b.crescent:
            m = np.clip(m - _ellipse(xs, ys, b, 0.85, 0.35 * b.rx, 0.0), 0.0, 1.0)
        img = img * (1.0 - m) + b.level * m
    return img * _sector_mask(size)


def render_archetype(plane_id: int, size: int, seed: int = 0) -> np.ndarray:
    return render_template(plane_archetype(plane_id, seed), size)


def _jitter(blobs: list[Blob], rng: np.random.Generator) -> list[Blob]:
    out = []
    for b in blobs:
        out.append(replace(
            b,
            cx=b.cx + rng.normal(0.0, 0.012),
            cy=b.cy + rng.normal(0.0, 0.012),
            rx=b.rx * (1.0 + rng.normal(0.0, 0.05)),
            ry=b.ry * (1.0 + rng.normal(0.0, 0.05)),
            angle=b.angle + rng.normal(0.0, 0.05),
        ))
    return out


def box_blur3(px: np.ndarray) -> np.ndarray:
    return ndimage.uniform_filter(px, size=3, mode="constant", cval=0.0)


def render_instance(plane_id: int, size: int, corpus_seed: int, rng: np.random.Generator) -> np.ndarray:
    """A pristine acquisition: jittered archetype, unit-mean Rayleigh speckle, 3x3 blur."""
    template = render_template(_jitter(plane_archetype(plane_id, corpus_seed), rng), size)
    gain = 1.0 + rng.normal(0.0, 0.04)
    speckle = rng.rayleigh(SPECKLE_SIGMA, size=(size, size)) / _RAYLEIGH_MEAN
    return np.clip(box_blur3(template * speckle * gain), 0.0, 1.0)


def _make(plane: PlaneLabel, split: str, idx: int, spec: CorpusSpec, seed: int, severity: float) -> Image:
    code = SPLITS.index(split)
    rng = np.random.default_rng([seed, plane.id, code, idx])
    px = render_instance(plane.id, spec.size, seed, rng)
    img = Image(px, plane=plane, severity=0.0, score=1.0, name=f"{plane.name}/{split}/img_{idx:05d}.pgm")
    if severity > 0:
        kind = "rigid" if rng.random() < 0.5 else "nonrigid"
        img = deform(img, kind, severity, [seed, plane.id, code, idx, 1])
        img.score = 1.0 - severity
    return img


def gen_synthetic_corpus(spec: CorpusSpec, seed: int) -> DatasetSplit:
    """Pure function of ``(spec, seed)``."""
    planes = spec.planes()
    pool: dict[int, list[Image]] = {}
    train: dict[int, list[Image]] = {}
    query: dict[int, list[Image]] = {}
    for p in planes:
        sev_rng = np.random.default_rng([seed, p.id, 99])
        n_bad = int(round(spec.pool_degraded_frac * spec.n_pool))
        pool_sev = [0.0] * (spec.n_pool - n_bad) + list(sev_rng.uniform(0.3, 1.0, size=n_bad))
        pool_sev = [pool_sev[i] for i in sev_rng.permutation(spec.n_pool)]
        train_sev = sev_rng.uniform(0.0, 1.0, size=spec.k2)
        query_sev = [0.0] * spec.n_query_pristine + list(sev_rng.uniform(0.0, 1.0, size=spec.n_query_degraded))
        pool[p.id] = [_make(p, "pool", i, spec, seed, float(s)) for i, s in enumerate(pool_sev)]
        train[p.id] = [_make(p, "train", i, spec, seed, float(s)) for i, s in enumerate(train_sev)]
        query[p.id] = [_make(p, "query", i, spec, seed, float(s)) for i, s in enumerate(query_sev)]
    return DatasetSplit(planes=planes, pool=pool, train=train, query=query, k1=spec.k1, k2=spec.k2)


# -- on-disk layout -------------------------------------------------------

def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


def write_corpus(split: DatasetSplit, root: str | os.PathLike) -> Path:
    """``<root>/<plane>/<split>/img_%05d.pgm`` plus ``manifest.csv``."""
    root = Path(root)
    rows = []
    for name, group in (("pool", split.pool), ("train", split.train), ("query", split.query)):
        for p in split.planes:
            d = root / p.name / name
            d.mkdir(parents=True, exist_ok=True)
            for i, img in enumerate(group.get(p.id, [])):
                rel = f"{p.name}/{name}/img_{i:05d}.pgm"
                save_pgm(img, root / rel)
                rows.append((rel, p.name, name, _fmt(img.severity), _fmt(img.score)))
    with open(root / MANIFEST, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)
    return root / MANIFEST


def _opt_float(s: str) -> float | None:
    return float(s) if s.strip() else None


def read_manifest(root: str | os.PathLike) -> list[dict[str, str]]:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise FormatError(f"missing {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_HEADER:
            raise FormatError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
        return list(reader)


def read_corpus(root: str | os.PathLike, k1: int | None = None) -> DatasetSplit:
    """Load a corpus written by :func:`write_corpus`; ``k1`` defaults to the largest legal value."""
    root = Path(root)
    rows = read_manifest(root)
    names: list[str] = []
    for r in rows:
        if r["plane"] not in names:
            names.append(r["plane"])
    planes = [PlaneLabel(i, n) for i, n in enumerate(sorted(names))]
    by_name = {p.name: p for p in planes}
    groups: dict[str, dict[int, list[Image]]] = {s: {p.id: [] for p in planes} for s in SPLITS}
    for r in rows:
        if r["split"] not in groups:
            raise FormatError(f"unknown split {r['split']!r} in manifest")
        p = by_name[r["plane"]]
        img = load_pgm(root / r["path"], plane=p)
        img.name = r["path"]
        img.severity = _opt_float(r["severity"])
        img.score = _opt_float(r["score"])
        groups[r["split"]][p.id].append(img)
    k2 = min((len(v) for v in groups["train"].values()), default=0)
    if k1 is None:
        k1 = k2 // 5
    return DatasetSplit(planes=planes, pool=groups["pool"], train=groups["train"], query=groups["query"],
                        k1=k1, k2=k2)
