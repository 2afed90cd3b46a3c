"""Sequential per-plane training with Adam and the masked general-expert update."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError
from .imaging import AugmentConfig, DatasetSplit, Image, augment
from .losses import total_loss
from .model import QCModel
from .numerics import Tensor, backward, no_grad

LOG_HEADER = ("epoch", "plane", "sim", "ncc", "smooth", "orth", "total")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    general_lr: float | None = None
    epochs: int = 30
    batch_size: int = 4
    steps_per_epoch: int | None = None
    seed: int = 0
    lam: float = 0.5
    plane_order: tuple[int, ...] | None = None
    orth_all_experts: bool = False
    checkpoint_every: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> AdamState:
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place. A ``None`` gradient counts as zero."""
    if not (len(params) == len(grads) == len(state.m)):
        raise DimensionError("params, grads and optimizer state disagree in length")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape or (g is not None and g.shape != p.shape):
            raise DimensionError(f"shape mismatch in Adam step: {p.shape}")
        g64 = np.zeros(p.shape) if g is None else g.astype(np.float64)
        m *= beta1
        m += (1.0 - beta1) * g64
        v *= beta2
        v += (1.0 - beta2) * g64 * g64
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = (beta1, beta2)
        self.eps = eps
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state, self.lr,
                  *self.betas, self.eps)


@dataclass
class LogRow:
    epoch: int
    plane: int
    sim: float
    ncc: float
    smooth: float
    orth: float
    total: float

    def csv_row(self) -> list[str]:
        return [str(self.epoch), str(self.plane)] + [repr(getattr(self, k)) for k in LOG_HEADER[2:]]


def write_log(path: str | Path, rows: Sequence[LogRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow(r.csv_row())


def train(cfg: TrainConfig, split: DatasetSplit, model: QCModel, log_path: str | Path | None = None,
          checkpoint_dir: str | Path | None = None,
          on_epoch: Callable[[LogRow, QCModel], None] | None = None) -> list[LogRow]:
    """Train plane by plane; returns one log row per (plane, epoch)."""
    order = list(cfg.plane_order) if cfg.plane_order is not None else sorted(p.id for p in split.planes)
    for c in order:
        if not 0 <= c < model.cfg.n_planes:
            raise ConfigError(f"plane {c} outside the model's {model.cfg.n_planes} planes")
        if not split.anchors.get(c):
            raise ConfigError(f"plane {c} has no anchors; select anchors before training")
        if not split.train.get(c):
            raise ConfigError(f"plane {c} has no training images")
    general_lr = cfg.lr if cfg.general_lr is None else cfg.general_lr
    rows: list[LogRow] = []

    for c in order:
        anchors = [model.backbone(a.pixels) for a in split.anchors[c]]
        images = split.train[c]
        params = model.lra_parameters() + model.plane_parameters(c)
        if cfg.orth_all_experts:
            params += [bank.planes[o].A for bank in model.banks for o in range(model.cfg.n_planes) if o != c]
        opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        for bank in model.banks:
            bank.begin_plane(c)
        steps = cfg.steps_per_epoch or math.ceil(len(images) / cfg.batch_size)
        for epoch in range(cfg.epochs):
            rng = np.random.default_rng([cfg.seed, c, epoch])
            perm = rng.permutation(len(images))
            sums = dict.fromkeys(LOG_HEADER[2:], 0.0)
            for step in range(steps):
                idx = [perm[(step * cfg.batch_size + b) % len(images)] for b in range(cfg.batch_size)]
                pick = rng.integers(len(anchors), size=cfg.batch_size)
                bundle = _batch_loss(model, c, cfg, [anchors[j] for j in pick],
                                     [augment(images[i], cfg.augment, [cfg.seed, c, epoch, step, b])
                                      for b, i in enumerate(idx)])
                backward(bundle.total)
                opt.step()
                for bank in model.banks:
                    bank.update_general(general_lr)
                model.zero_grad()
                for k, v in bundle.values().items():
                    if k in sums:
                        sums[k] += v
            row = LogRow(epoch, c, *(sums[k] / steps for k in LOG_HEADER[2:]))
            rows.append(row)
            if on_epoch is not None:
                on_epoch(row, model)
            if checkpoint_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                model.save(Path(checkpoint_dir) / f"plane{c}_epoch{epoch + 1:03d}.strq")
        for bank in model.banks:
            bank.commit_plane(c)
        if log_path is not None:
            write_log(log_path, rows)
    if log_path is not None:
        write_log(log_path, rows)
    return rows


def _batch_loss(model: QCModel, plane: int, cfg: TrainConfig, anchor_bbs, queries: Sequence[Image]):
    sims, nccs, smooths = [], [], []
    for abb, q in zip(anchor_bbs, queries):
        terms = model.pair_terms(model.train_features(abb, plane), model.train_features(model.backbone(q.pixels), plane))
        sims.append(terms.sim)
        nccs.append(terms.ncc)
        smooths.append(terms.smooth)
    n = 1.0 / len(queries)
    orth = model.orth_loss(plane, cfg.orth_all_experts)
    return total_loss(_sum(sims) * n, _sum(nccs) * n, _sum(smooths) * n, orth, cfg.lam)


def _sum(ts: Sequence[Tensor]) -> Tensor:
    out = ts[0]
    for t in ts[1:]:
        out = out + t
    return out


def heldout_reg(model: QCModel, pairs: Sequence[tuple[np.ndarray, np.ndarray]], plane: int) -> float:
    """Mean registration loss (sim + ncc + smooth) over (anchor, query) pixel pairs, forward only."""
    if not pairs:
        raise ConfigError("no held-out pairs")
    vals = []
    with no_grad():
        for a, q in pairs:
            t = model.pair_terms(model.train_features(model.backbone(a), plane),
                                 model.train_features(model.backbone(q), plane))
            vals.append(t.sim.item() + t.ncc.item() + t.smooth.item())
    return math.fsum(vals) / len(vals)
