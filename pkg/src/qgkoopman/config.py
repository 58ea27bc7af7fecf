"""Run configuration: a nested YAML document with reference defaults.

Unknown keys are rejected at every level so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

import numpy as np
import yaml

from .losses import LossWeights
from .qg_core import QGParams
from .training import TrainConfig

__all__ = ["ConfigError", "DatasetConfig", "EvalConfig", "ModelConfig", "RunConfig"]


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    spinup_days: float = 2000.0
    run_days: float = 4000 * 5 / 24  # 4000 snapshots at 5 h
    subsample: int = 5
    out_resolution: int = 64


@dataclass
class ModelConfig:
    d: int = 128
    rollout_len: int = 10
    batch_size: int = 32
    lr: float = 2e-4
    weight_decay: float = 1e-5
    epochs: int = 2
    stabilize_margin: float | None = None
    rk4_substeps: int = 1
    ridge: float = 0.0
    w_pred: float = 1.0
    w_latent: float = 1e-6
    w_phys: float = 0.1
    grad_mask_strength: float = 1.0
    repulsion_scale: float = 1e-4
    repulsion_bandwidth: float = 0.1

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(rollout_len=self.rollout_len, batch_size=self.batch_size, lr=self.lr,
                           weight_decay=self.weight_decay, epochs=self.epochs, seed=seed,
                           stabilize_margin=self.stabilize_margin,
                           rk4_substeps=self.rk4_substeps, ridge=self.ridge)

    def loss_weights(self) -> LossWeights:
        return LossWeights(w_pred=self.w_pred, w_latent=self.w_latent, w_phys=self.w_phys,
                           grad_mask_strength=self.grad_mask_strength,
                           repulsion_scale=self.repulsion_scale,
                           repulsion_bandwidth=self.repulsion_bandwidth)


@dataclass
class EvalConfig:
    horizon: int = 2000
    mode: str = "matrix_exp"
    dt_query_hours: float = 5.0
    early_step: int = 1
    max_lag: int = 50


def _physics_default() -> dict:
    return QGParams(nx=128, ny=128).to_dict()


@dataclass
class RunConfig:
    seed: int = 0
    physics: dict = field(default_factory=_physics_default)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.params  # validates physics

    @property
    def params(self) -> QGParams:
        try:
            return QGParams(**self.physics)
        except TypeError as exc:
            raise ConfigError(f"physics: {exc}") from None

    def seeds(self) -> tuple[int, int]:
        """Independent ``(dataset, training)`` seeds derived from ``seed``."""
        ss = np.random.SeedSequence(int(self.seed))
        a, b = ss.spawn(2)
        return int(a.generate_state(1, np.uint64)[0]), int(b.generate_state(1, np.uint64)[0])

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["physics"] = dict(self.physics)
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data or {})
        _reject_unknown(data, {f.name for f in fields(cls)}, "")
        physics = _physics_default()
        given = data.get("physics") or {}
        _reject_unknown(given, set(physics), "physics.")
        physics.update(given)
        sections = {}
        for name, typ in (("dataset", DatasetConfig), ("model", ModelConfig), ("eval", EvalConfig)):
            sec = data.get(name) or {}
            _reject_unknown(sec, {f.name for f in fields(typ)}, f"{name}.")
            sections[name] = typ(**sec)
        try:
            return cls(seed=int(data.get("seed", 0)), physics=physics, **sections)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        return cls.from_dict(yaml.safe_load(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_yaml(fh.read())

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_yaml())


def _reject_unknown(section: dict, allowed: set, prefix: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping")
    extra = sorted(set(section) - allowed)
    if extra:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in extra)}")
