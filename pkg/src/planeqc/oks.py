"""Per-plane low-rank experts, a shared general expert, and inference-time basis selection.

Every level of the encoder owns one ``ExpertBank``: a ``PlaneExpert`` per
plane plus one ``GeneralExpert``. During training, plane ``c`` adapts through
its own expert plus the general one. The general expert's gradient is split by
a conflict mask: masked entries move along the component orthogonal to the
task vectors of planes already trained, the rest take the plain gradient. At
inference, the most strongly activated bases of all experts are concatenated
into a single ``SynergyExpert``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, StateError
from .numerics import Tensor, matmul

GS_DROP_TOL = 1e-10


def effective_rank(r: int, d: int) -> int:
    """Largest rank not above ``r`` that still satisfies ``rank <= d / 2``."""
    if r < 1:
        raise ConfigError(f"rank must be >= 1, got {r}")
    rank = min(r, d // 2)
    if rank < 1:
        raise ConfigError(f"dimension {d} too small for a low-rank expert")
    return rank


def _check_shape(r: int, d: int) -> None:
    if r < 1 or 2 * r > d:
        raise ConfigError(f"expert rank {r} must satisfy 1 <= r <= d/2 with d={d}")


def _init_a(rng: np.random.Generator, r: int, d: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(d), size=(r, d))


class PlaneExpert:
    def __init__(self, plane: int, level: int, r: int, d: int, rng: np.random.Generator | None = None):
        _check_shape(r, d)
        rng = rng or np.random.default_rng([plane, level])
        self.plane = plane
        self.level = level
        self.A = Tensor(_init_a(rng, r, d), requires_grad=True)
        self.B = Tensor(np.zeros((d, r)), requires_grad=True)
        self.snapshot: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.A, self.B]

    def take_snapshot(self) -> None:
        self.snapshot = (self.A.data.copy(), self.B.data.copy())

    def set(self, a: np.ndarray, b: np.ndarray) -> None:
        if a.shape != self.A.shape or b.shape != self.B.shape:
            raise DimensionError("expert shape mismatch")
        self.A = Tensor(a, requires_grad=True, dtype=self.A.dtype)
        self.B = Tensor(b, requires_grad=True, dtype=self.B.dtype)


class GeneralExpert(PlaneExpert):
    def __init__(self, level: int, r: int, d: int, gamma: float = 0.1, rng: np.random.Generator | None = None):
        super().__init__(-1, level, r, d, rng or np.random.default_rng([level, 7919]))
        self.gamma = float(gamma)


@dataclass
class TaskVector:
    A: np.ndarray
    B: np.ndarray


@dataclass
class ConflictMask:
    A: np.ndarray
    B: np.ndarray
    union: bool = False

    def __post_init__(self) -> None:
        self.A = np.asarray(self.A, dtype=np.uint8)
        self.B = np.asarray(self.B, dtype=np.uint8)
        if self.A.size and self.A.max() > 1 or self.B.size and self.B.max() > 1:
            raise ConfigError("mask entries must be 0 or 1")


def snapshot_and_task_vector(expert: PlaneExpert) -> TaskVector:
    if expert.snapshot is None:
        raise StateError(f"plane {expert.plane} level {expert.level + 1} has no pre-training snapshot")
    a0, b0 = expert.snapshot
    return TaskVector(expert.A.data.astype(np.float64) - a0, expert.B.data.astype(np.float64) - b0)


def _quantile_mask(t: np.ndarray, level: float) -> np.ndarray:
    q = np.quantile(t, level, method="linear")
    return (t > q).astype(np.uint8)


def build_conflict_mask(t: TaskVector, n_planes: int) -> ConflictMask:
    if n_planes < 2:
        raise ConfigError(f"conflict masks need at least 2 planes, got {n_planes}")
    level = (n_planes - 1) / n_planes
    return ConflictMask(_quantile_mask(t.A, level), _quantile_mask(t.B, level))


def union_mask(masks: Sequence[ConflictMask]) -> ConflictMask:
    if not masks:
        raise ConfigError("union of zero masks is undefined")
    a, b = masks[0].A.copy(), masks[0].B.copy()
    for m in masks[1:]:
        if m.A.shape != a.shape or m.B.shape != b.shape:
            raise DimensionError("mask shapes differ")
        a |= m.A
        b |= m.B
    return ConflictMask(a, b, union=True)


class KnowledgeSpace:
    """Stack of unit-norm flattened task vectors with an orthonormal working copy."""

    def __init__(self, dim: int, literal: bool = False):
        self.dim = dim
        self.literal = literal
        self.raw = np.zeros((0, dim))
        self.basis = np.zeros((0, dim))

    def __len__(self) -> int:
        return self.raw.shape[0]

    def add(self, vec: np.ndarray) -> None:
        v = np.asarray(vec, dtype=np.float64).ravel()
        if v.size != self.dim:
            raise DimensionError(f"knowledge row has {v.size} entries, expected {self.dim}")
        n = np.linalg.norm(v)
        row = v / n if n > 0 else v
        self.raw = np.vstack([self.raw, row])
        if n == 0:
            return
        # Two passes of modified Gram-Schmidt keep the basis orthonormal to rounding.
        w = row.copy()
        for _ in range(2):
            for q in self.basis:
                w -= (q @ w) * q
        norm = np.linalg.norm(w)
        if norm > GS_DROP_TOL:
            self.basis = np.vstack([self.basis, w / norm])

    def matrix(self) -> np.ndarray:
        return self.raw if self.literal else self.basis


def orthogonal_project(g: np.ndarray, k: KnowledgeSpace | np.ndarray) -> np.ndarray:
    """``g - K^T K g`` for the flattened gradient ``g``; the result keeps ``g``'s shape."""
    mat = k.matrix() if isinstance(k, KnowledgeSpace) else np.asarray(k, dtype=np.float64)
    flat = np.asarray(g, dtype=np.float64).ravel()
    if mat.shape[0] == 0:
        if isinstance(k, KnowledgeSpace) and k.dim != flat.size:
            raise DimensionError(f"gradient has {flat.size} entries, knowledge space {k.dim}")
        return flat.reshape(np.shape(g)).copy()
    if mat.shape[1] != flat.size:
        raise DimensionError(f"gradient has {flat.size} entries, knowledge space {mat.shape[1]}")
    return (flat - mat.T @ (mat @ flat)).reshape(np.shape(g))


def masked_general_update(general: PlaneExpert, g_orth: tuple[np.ndarray, np.ndarray],
                          g: tuple[np.ndarray, np.ndarray], mask: ConflictMask | None, lr: float) -> None:
    """In-place step: masked entries use the projected gradient, the rest the raw one."""
    new = []
    for param, go, gc, m in ((general.A, g_orth[0], g[0], None if mask is None else mask.A),
                             (general.B, g_orth[1], g[1], None if mask is None else mask.B)):
        if go.shape != param.shape or gc.shape != param.shape or (m is not None and m.shape != param.shape):
            raise DimensionError("general-expert update shapes disagree")
        step = gc if m is None else np.where(m.astype(bool), go, gc)
        new.append(param.data - lr * step)
    general.set(*new)


def select_active_bases(a: np.ndarray | Tensor, x: np.ndarray, threshold: float,
                        use_abs: bool = False) -> tuple[list[int], np.ndarray]:
    """0-based indices whose activation ``(A x)_k`` strictly exceeds ``threshold``, and the activations."""
    mat = a.data if isinstance(a, Tensor) else np.asarray(a)
    x = np.asarray(x, dtype=np.float64).ravel()
    if mat.shape[1] != x.size:
        raise DimensionError(f"expert dim {mat.shape[1]} does not match input of size {x.size}")
    z = mat.astype(np.float64) @ x
    score = np.abs(z) if use_abs else z
    return [int(k) for k in np.flatnonzero(score > threshold)], z


def top_kappa(active: Sequence[int], z: np.ndarray, r: int, n_planes: int, use_abs: bool = False) -> list[int]:
    """The ``min(|active|, r // n_planes)`` active indices with the largest activation, lowest index first on ties."""
    kappa = min(len(active), r // n_planes)
    score = np.abs(z) if use_abs else np.asarray(z)
    ranked = sorted(active, key=lambda k: (-score[k], k))
    return sorted(ranked[:kappa])


@dataclass
class SynergyExpert:
    A: np.ndarray
    B: np.ndarray
    scale: float
    sources: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.A.shape[0] != self.B.shape[1]:
            raise DimensionError("A rows and B columns must match")

    @property
    def dim(self) -> int:
        return self.B.shape[0]

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def dense(self) -> np.ndarray:
        return self.scale * (self.B @ self.A)

    def contribution(self, x: Tensor) -> Tensor | None:
        if self.rank == 0 or self.scale == 0.0:
            return None
        a = Tensor(self.A, dtype=x.dtype)
        b = Tensor(self.B, dtype=x.dtype)
        return matmul(b, matmul(a, x)) * self.scale


def assemble_synergy(selections: Sequence[tuple[np.ndarray, np.ndarray]], alpha: float, r: int,
                     dim: int | None = None, sources: Sequence[tuple[int, int]] | None = None) -> SynergyExpert:
    """Stack selected A rows and the matching B columns, in the order given.

    Each selection is ``(A rows k x d, B columns d x k)``.
    """
    rows = [np.asarray(a, dtype=np.float64) for a, _ in selections if np.shape(a)[0]]
    cols = [np.asarray(b, dtype=np.float64) for a, b in selections if np.shape(a)[0]]
    dims = {m.shape[1] for m in rows} | {m.shape[0] for m in cols}
    if dim is not None:
        dims.add(dim)
    if len(dims) > 1:
        raise DimensionError(f"selected bases disagree on d: {sorted(dims)}")
    if not dims:
        raise DimensionError("cannot infer d from an empty selection")
    d = dims.pop()
    a = np.vstack(rows) if rows else np.zeros((0, d))
    b = np.hstack(cols) if cols else np.zeros((d, 0))
    return SynergyExpert(a, b, alpha / r, list(sources or []))


class TrainingAdapter:
    """Full plane expert plus full general expert, used while plane ``c`` trains."""

    def __init__(self, plane: PlaneExpert, general: GeneralExpert, scale: float):
        self.plane = plane
        self.general = general
        self.scale = scale
        self.dim = plane.dim

    def contribution(self, x: Tensor) -> Tensor | None:
        if self.scale == 0.0:
            return None
        out = matmul(self.plane.B, matmul(self.plane.A, x)) + matmul(self.general.B, matmul(self.general.A, x))
        return out * self.scale


class ExpertBank:
    """All experts attached to one encoder level."""

    def __init__(self, level: int, d: int, n_planes: int, r: int, alpha: float | None = None,
                 epsilon: float = 0.1, gamma: float = 0.1, use_abs: bool = False,
                 literal_projection: bool = False, seed: int = 0):
        if n_planes < 1:
            raise ConfigError("need at least one plane")
        self.level = level
        self.d = d
        self.r = effective_rank(r, d)
        self.alpha = float(self.r if alpha is None else alpha)
        self.epsilon = float(epsilon)
        self.use_abs = use_abs
        self.n_planes = n_planes
        self.planes = [PlaneExpert(c, level, self.r, d, np.random.default_rng([seed, level, c]))
                       for c in range(n_planes)]
        self.general = GeneralExpert(level, self.r, d, gamma, np.random.default_rng([seed, level, 7919]))
        self.space_a = KnowledgeSpace(self.r * d, literal_projection)
        self.space_b = KnowledgeSpace(d * self.r, literal_projection)
        self.task_vectors: dict[int, TaskVector] = {}
        self.masks: dict[int, ConflictMask] = {}

    @property
    def scale(self) -> float:
        return self.alpha / self.r

    def training_adapter(self, plane: int) -> TrainingAdapter:
        return TrainingAdapter(self.planes[plane], self.general, self.scale)

    def begin_plane(self, plane: int) -> None:
        self.planes[plane].take_snapshot()

    def commit_plane(self, plane: int) -> TaskVector:
        """Record the task vector, conflict mask and knowledge rows once the plane's block ends."""
        tv = snapshot_and_task_vector(self.planes[plane])
        self.task_vectors[plane] = tv
        if self.n_planes >= 2:
            self.masks[plane] = build_conflict_mask(tv, self.n_planes)
        self.space_a.add(tv.A)
        self.space_b.add(tv.B)
        return tv

    def seen_mask(self) -> ConflictMask | None:
        return union_mask(list(self.masks.values())) if self.masks else None

    def update_general(self, lr: float) -> None:
        ga, gb = self.general.A.grad, self.general.B.grad
        if ga is None or gb is None:
            return
        ga, gb = ga.astype(np.float64), gb.astype(np.float64)
        g_orth = (orthogonal_project(ga, self.space_a), orthogonal_project(gb, self.space_b))
        masked_general_update(self.general, g_orth, (ga, gb), self.seen_mask(), lr)

    def synergy(self, pooled: np.ndarray) -> SynergyExpert:
        selections = []
        sources = []
        for expert in self.planes:
            active, z = select_active_bases(expert.A, pooled, self.epsilon, self.use_abs)
            chosen = top_kappa(active, z, self.r, self.n_planes, self.use_abs)
            selections.append((expert.A.data[chosen], expert.B.data[:, chosen]))
            sources += [(expert.plane, k) for k in chosen]
        chosen, _ = select_active_bases(self.general.A, pooled, self.general.gamma, self.use_abs)
        selections.append((self.general.A.data[chosen], self.general.B.data[:, chosen]))
        sources += [(-1, k) for k in chosen]
        return assemble_synergy(selections, self.alpha, self.r, dim=self.d, sources=sources)

    def state_dict(self) -> dict[str, np.ndarray]:
        p = f"oks.l{self.level + 1}"
        out = {}
        for e in self.planes:
            out[f"{p}.plane{e.plane}.A"] = e.A.data
            out[f"{p}.plane{e.plane}.B"] = e.B.data
        out[f"{p}.general.A"] = self.general.A.data
        out[f"{p}.general.B"] = self.general.B.data
        for c, tv in sorted(self.task_vectors.items()):
            out[f"{p}.plane{c}.TA"] = tv.A
            out[f"{p}.plane{c}.TB"] = tv.B
        for c, m in sorted(self.masks.items()):
            out[f"{p}.plane{c}.MA"] = m.A.astype(np.float64)
            out[f"{p}.plane{c}.MB"] = m.B.astype(np.float64)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        p = f"oks.l{self.level + 1}"
        for e in self.planes:
            e.set(state[f"{p}.plane{e.plane}.A"], state[f"{p}.plane{e.plane}.B"])
        self.general.set(state[f"{p}.general.A"], state[f"{p}.general.B"])
        self.task_vectors.clear()
        self.masks.clear()
        self.space_a = KnowledgeSpace(self.space_a.dim, self.space_a.literal)
        self.space_b = KnowledgeSpace(self.space_b.dim, self.space_b.literal)
        for c in range(self.n_planes):
            if f"{p}.plane{c}.TA" in state:
                tv = TaskVector(state[f"{p}.plane{c}.TA"].astype(np.float64), state[f"{p}.plane{c}.TB"].astype(np.float64))
                self.task_vectors[c] = tv
                self.space_a.add(tv.A)
                self.space_b.add(tv.B)
            if f"{p}.plane{c}.MA" in state:
                self.masks[c] = ConflictMask(np.rint(state[f"{p}.plane{c}.MA"]), np.rint(state[f"{p}.plane{c}.MB"]))
