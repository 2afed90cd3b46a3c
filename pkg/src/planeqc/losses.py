"""Registration and subspace objectives.

All registration losses take per-level ``C x H x W`` maps and sum a per-level
value over the levels, so with three levels ``loss_sim`` and ``loss_ncc`` lie
in [-3, 3].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .errors import ConfigError, DimensionError
from .lra import AffineTransform
from .numerics import (
    Tensor,
    broadcast_to,
    matmul,
    reduce_l1,
    reduce_l2,
    reduce_mean,
    reduce_sum,
    sqrt,
    square,
)

EPS = 1e-6
ORTH_VARIANTS = ("l1_a", "fro_a", "l1_ab", "fro_ab")


def _pairs(a: Sequence[Tensor], b: Sequence[Tensor]):
    if len(a) != len(b):
        raise DimensionError(f"level count differs: {len(a)} vs {len(b)}")
    for fa, fb in zip(a, b):
        if fa.shape != fb.shape:
            raise DimensionError(f"feature shapes differ: {fa.shape} vs {fb.shape}")
        c = fa.shape[0]
        yield fa.reshape(c, -1), fb.reshape(c, -1)


def loss_sim(aligned_a: Sequence[Tensor], aligned_b: Sequence[Tensor]) -> Tensor:
    """Negative mean per-position cosine similarity, summed over levels."""
    total = None
    for xa, xb in _pairs(aligned_a, aligned_b):
        na = reduce_sum(square(xa), axis=0) + EPS
        nb = reduce_sum(square(xb), axis=0) + EPS
        cosine = reduce_sum(xa * xb, axis=0) / sqrt(na * nb)
        term = reduce_mean(cosine)
        total = term if total is None else total + term
    return -total


def loss_ncc(aligned_a: Sequence[Tensor], aligned_b: Sequence[Tensor]) -> Tensor:
    """Negative global normalized cross-correlation per channel, averaged over channels, summed over levels."""
    total = None
    for xa, xb in _pairs(aligned_a, aligned_b):
        ca = xa - broadcast_to(reduce_mean(xa, axis=1, keepdims=True), xa.shape)
        cb = xb - broadcast_to(reduce_mean(xb, axis=1, keepdims=True), xb.shape)
        cov = reduce_mean(ca * cb, axis=1)
        va = reduce_mean(square(ca), axis=1) + EPS
        vb = reduce_mean(square(cb), axis=1) + EPS
        term = reduce_mean(cov / sqrt(va * vb))
        total = term if total is None else total + term
    return -total


def loss_smooth(thetas: Sequence[AffineTransform | Tensor]) -> Tensor:
    """Sum over levels of ``||A - I||_F^2``, the constant Jacobian of an affine displacement."""
    total = None
    for t in thetas:
        theta = t.theta if isinstance(t, AffineTransform) else t
        lin = theta[:, :2]
        eye = Tensor([[1.0, 0.0], [0.0, 1.0]], dtype=theta.dtype)
        term = reduce_sum(square(lin - eye))
        total = term if total is None else total + term
    if total is None:
        raise DimensionError("loss_smooth needs at least one transform")
    return total


def _norm(m: Tensor, variant: str) -> Tensor:
    return reduce_l1(m) if variant.startswith("l1") else reduce_l2(m)


def loss_orth(a_mats: Sequence[Tensor], variant: str = "l1_a", b_mats: Sequence[Tensor] | None = None) -> Tensor:
    """Mean cross-Gram norm over ordered pairs of distinct plane experts.

    ``l1_a``/``fro_a`` penalise ``A_c A_c'^T``; the ``_ab`` variants add
    ``B_c^T B_c'`` with the same norm.
    """
    if variant not in ORTH_VARIANTS:
        raise ConfigError(f"unknown orth variant {variant!r}; expected one of {ORTH_VARIANTS}")
    n = len(a_mats)
    if n < 1:
        raise ConfigError("loss_orth needs at least one expert")
    if any(a.shape != a_mats[0].shape for a in a_mats):
        raise ConfigError("all experts must share rank and dimension")
    use_b = variant.endswith("_ab")
    if use_b:
        if b_mats is None or len(b_mats) != n:
            raise ConfigError(f"variant {variant!r} needs one B matrix per expert")
        if any(b.shape != b_mats[0].shape for b in b_mats):
            raise ConfigError("all experts must share rank and dimension")
    if n == 1:
        return Tensor(0.0, dtype=a_mats[0].dtype)
    total = None
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            term = _norm(matmul(a_mats[i], a_mats[j].T), variant)
            if use_b:
                term = term + _norm(matmul(b_mats[i].T, b_mats[j]), variant)
            total = term if total is None else total + term
    return total * (1.0 / (n * (n - 1)))


@dataclass
class LossBundle:
    sim: Tensor
    ncc: Tensor
    smooth: Tensor
    orth: Tensor
    reg: Tensor
    total: Tensor
    lam: float

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("sim", "ncc", "smooth", "orth", "reg", "total")}


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def total_loss(sim, ncc, smooth, orth, lam: float) -> LossBundle:
    """``reg = sim + ncc + smooth``; ``total = reg + lam * orth``."""
    sim, ncc, smooth, orth = _t(sim), _t(ncc), _t(smooth), _t(orth)
    reg = sim + ncc + smooth
    total = reg + orth * float(lam) if lam else reg
    return LossBundle(sim, ncc, smooth, orth, reg, total, float(lam))
