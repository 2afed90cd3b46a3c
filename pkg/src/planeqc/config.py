"""Flat, dotted-key run configuration with typed defaults."""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import ConfigError

DEFAULTS: dict[str, Any] = {
    "data.seed": 0,
    "data.n_planes": 2,
    "data.size": 128,
    "data.n_pool": 40,
    "data.k2": 100,
    "data.n_query_pristine": 10,
    "data.n_query_degraded": 30,
    "data.pool_degraded_frac": 0.3,
    "encoder.channels": [16, 32, 64],
    "encoder.seed": 0,
    "oks.r": 16,
    "oks.alpha": None,
    "oks.epsilon": 0.1,
    "oks.gamma": 0.1,
    "oks.abs_activation": False,
    "oks.literal_projection": False,
    "lra.mode": "affine",
    "lra.hidden": 16,
    "loss.lambda": 0.5,
    "loss.orth_variant": "l1_a",
    "anchors.strategy": "variance",
    "anchors.k1": 20,
    "anchors.seed": 0,
    "train.lr": 1e-4,
    "train.general_lr": None,
    "train.epochs": 30,
    "train.batch_size": 4,
    "train.steps_per_epoch": None,
    "train.seed": 0,
    "train.plane_order": None,
    "train.orth_all_experts": False,
    "train.checkpoint_every": 0,
    "augment.contrast": [0.8, 1.2],
    "augment.rotation_deg": 20.0,
    "augment.translation": 0.2,
    "augment.scale": [0.8, 1.2],
    "augment.noise_std": 0.03,
    "score.tau": 0.5,
    "score.w_sim": 1.0,
    "score.w_ncc": 1.0,
    "score.w_smooth": 1.0,
    "score.literal_formula": False,
    "sweep.kinds": ["rigid", "nonrigid"],
    "sweep.levels": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
    "sweep.n_images": 20,
    "sweep.seed": 0,
    "numerics.precision": "f32",
}

# Keys whose default is None and the types they accept otherwise.
NULLABLE: dict[str, tuple[type, ...]] = {
    "oks.alpha": (int, float),
    "train.general_lr": (int, float),
    "train.steps_per_epoch": (int,),
    "train.plane_order": (list,),
}


CHOICES: dict[str, tuple[str, ...]] = {
    "numerics.precision": ("f32", "f64"),
    "anchors.strategy": ("variance", "random", "kmedoids", "kcenter"),
    "loss.orth_variant": ("l1_a", "fro_a", "l1_ab", "fro_ab"),
}


def flatten(tree: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _check_type(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if value is None:
        if key in NULLABLE:
            return None
        raise ConfigError(f"{key} may not be null")
    allowed: tuple[type, ...]
    if key in NULLABLE:
        allowed = NULLABLE[key]
    elif isinstance(default, bool):
        allowed = (bool,)
    elif isinstance(default, float):
        allowed = (int, float)
    else:
        allowed = (type(default),)
    if isinstance(value, bool) and bool not in allowed:
        raise ConfigError(f"{key} expects {allowed[0].__name__}, got a boolean")
    if not isinstance(value, allowed):
        raise ConfigError(f"{key} expects {allowed[0].__name__}, got {type(value).__name__}")
    if float in allowed and not isinstance(value, bool):
        value = float(value)
    if key in CHOICES and value not in CHOICES[key]:
        raise ConfigError(f"{key} must be one of {CHOICES[key]}, got {value!r}")
    return value


class RunConfig:
    def __init__(self, values: Mapping[str, Any] | None = None):
        self.values: dict[str, Any] = copy.deepcopy(DEFAULTS)
        if values:
            self.update(values)

    def update(self, values: Mapping[str, Any]) -> None:
        for key, v in flatten(values).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            self.values[key] = _check_type(key, v)

    def __getitem__(self, key: str) -> Any:
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def to_json(self) -> str:
        return json.dumps(self.values, indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path: str | Path | None, overrides: Iterable[str] = ()) -> RunConfig:
        cfg = cls()
        if path is not None:
            try:
                data = json.loads(Path(path).read_text())
            except FileNotFoundError as exc:
                raise ConfigError(f"config file {path} not found") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
            if not isinstance(data, dict):
                raise ConfigError("config file must hold a JSON object")
            cfg.update(data)
        cfg.update(parse_overrides(overrides))
        return cfg


def parse_overrides(items: Iterable[str]) -> dict[str, Any]:
    """``key=value`` pairs; values are read as JSON when possible, else as plain strings."""
    out: dict[str, Any] = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            out[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            out[key.strip()] = raw
    return out
