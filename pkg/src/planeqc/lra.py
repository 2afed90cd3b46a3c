"""Latent registration: per-level affine predictors and differentiable warping.

Normalized coordinates put the corner pixel centres at exactly -1 and +1.
A theta maps target coordinates to source coordinates, ``src = theta @ [x, y, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .numerics import (
    Tensor,
    avg_pool2,
    concat,
    conv2d,
    cos,
    grid_sample,
    matmul,
    reduce_mean,
    relu,
    sin,
    stack,
)

MODES: dict[str, int] = {
    "affine": 6,
    "translation": 2,
    "rotation": 1,
    "scale": 2,
    "shear": 2,
    "rotation_scale": 3,
    "translation_scale": 4,
    "rotation_translation": 3,
}

# Raw-parameter order per mode:
#   affine (a, b, tx, c, d, ty)     translation (tx, ty)      rotation (angle)
#   scale (sx, sy)                  shear (lx, ly)            rotation_scale (angle, sx, sy)
#   translation_scale (tx, ty, sx, sy)                        rotation_translation (angle, tx, ty)
IDENTITY_PARAMS: dict[str, tuple[float, ...]] = {
    "affine": (1.0, 0.0, 0.0, 0.0, 1.0, 0.0),
    "translation": (0.0, 0.0),
    "rotation": (0.0,),
    "scale": (1.0, 1.0),
    "shear": (0.0, 0.0),
    "rotation_scale": (0.0, 1.0, 1.0),
    "translation_scale": (0.0, 0.0, 1.0, 1.0),
    "rotation_translation": (0.0, 0.0, 0.0),
}


@dataclass
class AffineTransform:
    theta: Tensor
    mode: str
    params: Tensor

    def linear(self) -> Tensor:
        return self.theta[:, :2]

    def matrix(self) -> np.ndarray:
        return self.theta.data.astype(np.float64)


def check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ConfigError(f"unknown transform mode {mode!r}; expected one of {sorted(MODES)}")


def build_affine(mode: str, params) -> AffineTransform:
    check_mode(mode)
    p = params if isinstance(params, Tensor) else Tensor(np.asarray(params, dtype=np.float64).reshape(-1))
    if p.shape != (MODES[mode],):
        raise ContractError(f"mode {mode!r} takes {MODES[mode]} parameters, got shape {p.shape}")
    zero = Tensor(0.0, dtype=p.dtype)
    one = Tensor(1.0, dtype=p.dtype)
    q = [p[i] for i in range(MODES[mode])]
    if mode == "affine":
        rows = q
    elif mode == "translation":
        rows = [one, zero, q[0], zero, one, q[1]]
    elif mode == "rotation":
        c, s = cos(q[0]), sin(q[0])
        rows = [c, -s, zero, s, c, zero]
    elif mode == "scale":
        rows = [q[0], zero, zero, zero, q[1], zero]
    elif mode == "shear":
        rows = [one, q[0], zero, q[1], one, zero]
    elif mode == "rotation_scale":
        c, s = cos(q[0]), sin(q[0])
        rows = [q[1] * c, -s, zero, s, q[2] * c, zero]
    elif mode == "translation_scale":
        rows = [q[2], zero, q[0], zero, q[3], q[1]]
    else:
        c, s = cos(q[0]), sin(q[0])
        rows = [c, -s, q[1], s, c, q[2]]
    return AffineTransform(stack(rows).reshape(2, 3), mode, p)


def identity_transform(mode: str = "affine") -> AffineTransform:
    return build_affine(mode, Tensor(IDENTITY_PARAMS[mode]))


def base_grid(h: int, w: int, dtype=None) -> np.ndarray:
    """``(h*w) x 3`` homogeneous target coordinates, row-major over (y, x)."""
    xs = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    out = np.stack([gx.ravel(), gy.ravel(), np.ones(h * w)], axis=1)
    return out if dtype is None else out.astype(dtype)


def affine_grid(theta: Tensor | AffineTransform, h: int, w: int) -> Tensor:
    """Sampling grid ``h x w x 2`` with ``grid(p) = theta @ [p_x, p_y, 1]``."""
    if isinstance(theta, AffineTransform):
        theta = theta.theta
    if theta.shape != (2, 3):
        raise ContractError(f"theta must be 2x3, got {theta.shape}")
    base = Tensor(base_grid(h, w), dtype=theta.dtype)
    return matmul(base, theta.T).reshape(h, w, 2)


def sample_bilinear(feat: Tensor, grid: Tensor) -> Tensor:
    return grid_sample(feat, grid)


def compose(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    """Theta of ``sample(sample(f, inner), outer)`` as a single warp.

    Sampling with ``outer`` reads the inner-warped map at ``outer @ p``, which
    in turn reads the source at ``inner @ [outer @ p; 1]``.
    """
    h_in = np.vstack([inner, [0.0, 0.0, 1.0]])
    h_out = np.vstack([outer, [0.0, 0.0, 1.0]])
    return (h_in @ h_out)[:2]


class LocalisationNet:
    """Two stride-2 3x3 convs, global average pool, linear head onto mode deltas.

    The head starts at zero, so a fresh net outputs the identity transform.
    """

    def __init__(self, in_channels: int, hidden: int, mode: str, seed, prefix: str = "lra"):
        check_mode(mode)
        self.mode = mode
        self.in_channels = in_channels
        self.prefix = prefix
        rng = np.random.default_rng(seed)
        n = MODES[mode]

        def he(shape):
            return rng.normal(0.0, np.sqrt(2.0 / np.prod(shape[1:])), size=shape)

        self.params: dict[str, Tensor] = {
            "conv1.w": Tensor(he((hidden, in_channels, 3, 3)), requires_grad=True),
            "conv1.b": Tensor(np.zeros(hidden), requires_grad=True),
            "conv2.w": Tensor(he((hidden, hidden, 3, 3)), requires_grad=True),
            "conv2.b": Tensor(np.zeros(hidden), requires_grad=True),
            "head.w": Tensor(np.zeros((n, hidden)), requires_grad=True),
            "head.b": Tensor(np.zeros(n), requires_grad=True),
        }
        self._identity = np.asarray(IDENTITY_PARAMS[mode])

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def __call__(self, src_a: Tensor, src_b: Tensor) -> AffineTransform:
        p = self.params
        x = concat([src_a, src_b], axis=0)
        if x.shape[0] != self.in_channels:
            raise ConfigError(f"localisation net expects {self.in_channels} channels, got {x.shape[0]}")
        x = relu(conv2d(x, p["conv1.w"], p["conv1.b"], stride=2, padding=1))
        x = relu(conv2d(x, p["conv2.w"], p["conv2.b"], stride=2, padding=1))
        v = reduce_mean(x, axis=(1, 2)).reshape(-1, 1)
        delta = matmul(p["head.w"], v).reshape(-1) + p["head.b"]
        return build_affine(self.mode, delta + Tensor(self._identity, dtype=delta.dtype))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"{self.prefix}.{k}": v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            key = f"{self.prefix}.{k}"
            if key not in state or state[key].shape != v.shape:
                raise ConfigError(f"checkpoint entry {key} missing or misshapen")
            self.params[k] = Tensor(state[key], requires_grad=True, dtype=v.dtype)


def cascade_align(feats_a: Sequence[Tensor], feats_b: Sequence[Tensor],
                  nets: Sequence[LocalisationNet]) -> tuple[list[Tensor], list[Tensor], list[AffineTransform]]:
    """Level-by-level alignment of stream B onto stream A.

    Level 1 sources are the raw features. At level ``l`` the net sees the
    concatenated sources and predicts ``theta_l``, which warps B's raw level-l
    map; stream A is the fixed reference and passes through unchanged. The
    aligned pair, 2x average-pooled, seeds the sources of level ``l + 1``.
    """
    if not (len(feats_a) == len(feats_b) == len(nets)):
        raise ContractError("need one feature map per level in both streams and one net per level")
    aligned_a: list[Tensor] = []
    aligned_b: list[Tensor] = []
    thetas: list[AffineTransform] = []
    src_a, src_b = feats_a[0], feats_b[0]
    for level, net in enumerate(nets):
        if level > 0:
            src_a = avg_pool2(aligned_a[-1])
            src_b = avg_pool2(aligned_b[-1])
        t = net(src_a, src_b)
        _, h, w = feats_b[level].shape
        aligned_a.append(feats_a[level])
        aligned_b.append(sample_bilinear(feats_b[level], affine_grid(t, h, w)))
        thetas.append(t)
    return aligned_a, aligned_b, thetas
