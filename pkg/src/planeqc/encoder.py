"""Frozen three-level Siamese feature extractor.

Each stage is a stride-2 3x3 convolution followed by one residual block. The
backbone never records on the gradient tape. Per level, a frozen 1x1 channel
projection ``W0`` maps the backbone output; the only trainable part of the
feature path is the low-rank update an adapter adds on top of it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import Tensor, conv2d, matmul, no_grad, relu

LEVELS = 3


@dataclass(frozen=True)
class EncoderConfig:
    channels: tuple[int, ...] = (16, 32, 64)
    seed: int = 0
    in_channels: int = 1

    def __post_init__(self) -> None:
        if len(self.channels) != LEVELS:
            raise ConfigError(f"encoder needs exactly {LEVELS} levels, got {len(self.channels)}")
        if any(c < 2 for c in self.channels):
            raise ConfigError("channel counts must be >= 2")


class Adapter(Protocol):
    dim: int

    def contribution(self, x: Tensor) -> Tensor | None:
        """Low-rank update for channel-major ``C x N`` input, or None for a zero map."""


@dataclass
class LevelFeatures:
    maps: list[Tensor]
    role: str = "source"

    def __getitem__(self, level: int) -> Tensor:
        return self.maps[level]

    def __len__(self) -> int:
        return len(self.maps)


def _he(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


class Encoder:
    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 1])
        self.weights: dict[str, Tensor] = {}
        c_in = cfg.in_channels
        for i, c in enumerate(cfg.channels, start=1):
            for part, cin in (("conv", c_in), ("res1", c), ("res2", c)):
                self.weights[f"enc.l{i}.{part}.w"] = Tensor(_he(rng, (c, cin, 3, 3)))
                self.weights[f"enc.l{i}.{part}.b"] = Tensor(np.zeros(c))
            c_in = c
        for i, c in enumerate(cfg.channels, start=1):
            self.weights[f"proj.l{i}.w0"] = Tensor(_orthogonal(rng, c))

    @property
    def channels(self) -> tuple[int, ...]:
        return self.cfg.channels

    def backbone(self, pixels: np.ndarray) -> list[Tensor]:
        """Raw per-level backbone maps, ``C_l x H/2^l x W/2^l``."""
        if pixels.ndim != 2 or pixels.shape[0] % 8 or pixels.shape[1] % 8:
            raise DimensionError(f"image sides must be multiples of 8, got {pixels.shape}")
        w = self.weights
        out = []
        with no_grad():
            x = Tensor(pixels[None])
            for i in range(1, LEVELS + 1):
                h = relu(conv2d(x, w[f"enc.l{i}.conv.w"], w[f"enc.l{i}.conv.b"], stride=2, padding=1))
                r = relu(conv2d(h, w[f"enc.l{i}.res1.w"], w[f"enc.l{i}.res1.b"], padding=1))
                r = conv2d(r, w[f"enc.l{i}.res2.w"], w[f"enc.l{i}.res2.b"], padding=1)
                x = relu(h + r)
                out.append(x)
        return out

    def embed(self, pixels: np.ndarray) -> np.ndarray:
        """Global-average-pooled level-3 backbone features (the anchor-selection embedding)."""
        return self.backbone(pixels)[-1].data.mean(axis=(1, 2)).astype(np.float64)

    def project(self, level: int, x: Tensor, adapter: Adapter | None = None) -> Tensor:
        c, h, wd = x.shape
        if c != self.channels[level]:
            raise DimensionError(f"level {level + 1} expects {self.channels[level]} channels, got {c}")
        flat = x.reshape(c, h * wd)
        out = matmul(self.weights[f"proj.l{level + 1}.w0"], flat)
        if adapter is not None:
            if adapter.dim != c:
                raise ConfigError(f"adapter dim {adapter.dim} does not match level {level + 1} channels {c}")
            delta = adapter.contribution(flat)
            if delta is not None:
                out = out + delta
        return out.reshape(c, h, wd)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.weights.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.weights.items():
            if k not in state:
                raise ConfigError(f"checkpoint lacks {k}")
            if state[k].shape != v.shape:
                raise ConfigError(f"{k}: shape {state[k].shape} != {v.shape}")
            self.weights[k] = Tensor(state[k], dtype=v.dtype)


def build_encoder(cfg: EncoderConfig) -> Encoder:
    return Encoder(cfg)


def extract(enc: Encoder, pixels: np.ndarray | Sequence[Tensor],
            adapters: Sequence[Adapter | None] | None = None) -> LevelFeatures:
    """Adapted features ``W0 x + delta(x)`` at every level.

    ``pixels`` may also be a precomputed backbone output, which lets callers
    reuse it across several adapter contexts.
    """
    maps = enc.backbone(pixels) if isinstance(pixels, np.ndarray) else list(pixels)
    adapters = adapters or [None] * LEVELS
    return LevelFeatures([enc.project(i, m, a) for i, (m, a) in enumerate(zip(maps, adapters))])
