"""The full quality-control network: frozen encoder, per-level expert banks, cascaded aligners."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import Encoder, EncoderConfig, LevelFeatures, build_encoder, extract
from .errors import ConfigError, FormatError
from .losses import ORTH_VARIANTS, loss_ncc, loss_orth, loss_sim, loss_smooth
from .lra import AffineTransform, LocalisationNet, cascade_align, check_mode
from .numerics import Tensor, encode_tensors, load_tensors, save_tensors
from .oks import ExpertBank, SynergyExpert

TERMS = ("sim", "ncc", "smooth")


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple[int, ...] = (16, 32, 64)
    n_planes: int = 2
    rank: int = 16
    alpha: float | None = None
    epsilon: float = 0.1
    gamma: float = 0.1
    abs_activation: bool = False
    literal_projection: bool = False
    lra_mode: str = "affine"
    lra_hidden: int = 16
    orth_variant: str = "l1_a"
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        check_mode(self.lra_mode)
        if self.orth_variant not in ORTH_VARIANTS:
            raise ConfigError(f"unknown orth variant {self.orth_variant!r}")
        if self.n_planes < 1:
            raise ConfigError("n_planes must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class PairTerms:
    sim: Tensor
    ncc: Tensor
    smooth: Tensor
    thetas: list[AffineTransform]

    def values(self) -> dict[str, float]:
        return {"sim": self.sim.item(), "ncc": self.ncc.item(), "smooth": self.smooth.item()}


class QCModel:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.encoder: Encoder = build_encoder(EncoderConfig(cfg.channels, seed=cfg.seed))
        self.banks = [
            ExpertBank(level, d, cfg.n_planes, cfg.rank, cfg.alpha, cfg.epsilon, cfg.gamma,
                       cfg.abs_activation, cfg.literal_projection, seed=cfg.seed)
            for level, d in enumerate(cfg.channels)
        ]
        # Level l > 1 sees the pooled aligned map of level l - 1, hence the shifted channel counts.
        src = (cfg.channels[0],) + tuple(cfg.channels[:-1])
        self.nets = [
            LocalisationNet(2 * c, cfg.lra_hidden, cfg.lra_mode, [cfg.seed, 101, level], prefix=f"lra.l{level + 1}")
            for level, c in enumerate(src)
        ]

    # -- features -----------------------------------------------------------
    def backbone(self, pixels: np.ndarray) -> list[Tensor]:
        return self.encoder.backbone(pixels)

    def train_features(self, bb: Sequence[Tensor], plane: int) -> LevelFeatures:
        return extract(self.encoder, bb, [b.training_adapter(plane) for b in self.banks])

    def synergy(self, bb: Sequence[Tensor]) -> list[SynergyExpert]:
        return [bank.synergy(m.data.mean(axis=(1, 2))) for bank, m in zip(self.banks, bb)]

    def infer_features(self, bb: Sequence[Tensor]) -> LevelFeatures:
        return extract(self.encoder, bb, self.synergy(bb))

    def features(self, pixels: np.ndarray) -> LevelFeatures:
        return self.infer_features(self.backbone(pixels))

    # -- losses -------------------------------------------------------------
    def pair_terms(self, anchor: LevelFeatures, query: LevelFeatures) -> PairTerms:
        """Registration terms with the anchor as the fixed stream and the query as the moving one."""
        aa, ab, thetas = cascade_align(anchor.maps, query.maps, self.nets)
        return PairTerms(loss_sim(aa, ab), loss_ncc(aa, ab), loss_smooth(thetas), thetas)

    def orth_loss(self, plane: int | None = None, all_experts: bool = False) -> Tensor:
        """Cross-plane orthogonality penalty averaged over levels.

        Only ``plane``'s matrices carry gradient unless ``all_experts`` is set.
        """
        variant = self.cfg.orth_variant
        total = None
        for bank in self.banks:
            def pick(t: Tensor, c: int) -> Tensor:
                return t if all_experts or c == plane else Tensor(t.data, dtype=t.dtype)
            a = [pick(e.A, e.plane) for e in bank.planes]
            b = [pick(e.B, e.plane) for e in bank.planes] if variant.endswith("_ab") else None
            term = loss_orth(a, variant, b)
            total = term if total is None else total + term
        return total * (1.0 / len(self.banks))

    def cross_gram_l1(self) -> float:
        """Mean absolute off-diagonal cross-Gram entry ``|A_c A_c'^T|`` over plane pairs and levels."""
        vals = []
        for bank in self.banks:
            mats = [e.A.data.astype(np.float64) for e in bank.planes]
            for i in range(len(mats)):
                for j in range(len(mats)):
                    if i != j:
                        vals.append(np.abs(mats[i] @ mats[j].T).mean())
        return float(np.mean(vals)) if vals else 0.0

    # -- parameters ---------------------------------------------------------
    def lra_parameters(self) -> list[Tensor]:
        return [p for net in self.nets for p in net.parameters()]

    def plane_parameters(self, plane: int) -> list[Tensor]:
        return [p for bank in self.banks for p in bank.planes[plane].parameters()]

    def general_parameters(self) -> list[Tensor]:
        return [p for bank in self.banks for p in bank.general.parameters()]

    def all_trainable(self) -> list[Tensor]:
        out = self.lra_parameters() + self.general_parameters()
        for c in range(self.cfg.n_planes):
            out += self.plane_parameters(c)
        return out

    def zero_grad(self) -> None:
        for p in self.all_trainable():
            p.grad = None

    # -- persistence --------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        out = dict(self.encoder.state_dict())
        for bank in self.banks:
            out.update(bank.state_dict())
        for net in self.nets:
            out.update(net.state_dict())
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.encoder.load_state_dict(state)
        for bank in self.banks:
            bank.load_state_dict(state)
        for net in self.nets:
            net.load_state_dict(state)

    def fingerprint(self) -> str:
        h = hashlib.sha256(json.dumps(self.cfg.to_dict(), sort_keys=True).encode())
        h.update(encode_tensors(self.state_dict()))
        return h.hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        path = Path(path)
        save_tensors(path, self.state_dict())
        config_path(path).write_text(json.dumps(self.cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> QCModel:
        path = Path(path)
        side = config_path(path)
        if not side.exists():
            raise FormatError(f"model config sidecar {side} is missing")
        model = cls(ModelConfig.from_dict(json.loads(side.read_text())))
        model.load_state_dict(load_tensors(path))
        return model


def config_path(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")
