"""Flat run configuration read from a YAML mapping of scalar keys."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str | None = None

    # data
    data_source: str = "synthetic"  # "synthetic" or "csv"
    events_path: str | None = None
    schema_path: str | None = None
    labels_path: str | None = None
    tick_hours: float = 0.5
    n_subjects: int = 2000
    n_features: int = 16
    n_informative: int = 4
    n_static: int = 2
    tick_min: int = 16
    tick_max: int = 24
    ar_coeff: float = 0.9
    noise_std: float = 0.45
    label_noise_std: float = 0.3
    relevance_switch: bool = False
    data_seed: int | None = None  # defaults to seed
    train_fraction: float = 0.68
    val_fraction: float = 0.12
    test_fraction: float = 0.20

    # task and costs
    task: str = "regression"
    predictor_kind: str = "gbdt"
    cost_mode: str = "simple"
    c_max: float = math.inf

    # predictor
    gbdt_trees: int = 100
    gbdt_depth: int = 4
    gbdt_lr: float = 0.1
    gbdt_min_leaf: int = 20
    gbdt_max_bins: int = 64
    gbdt_models: int = 1
    rnn_hidden: int = 32
    rnn_epochs: int = 20
    rnn_lr: float = 1e-3
    rnn_batch: int = 64

    # reward
    alpha: float = 10.0
    beta: float = 5.0
    delta_beta: float = 5.0
    c_base: float = 0.2
    l_eps: float = 1.0
    ema_coeff: float = 0.95
    plateau_threshold: float = 0.5
    plateau_window: int = 3
    literal_signs: bool = False

    # policy optimization
    gamma: float = 0.8
    lam: float = 0.95
    clip_eps: float = 0.2
    ppo_lr: float = 1e-3
    adam_eps: float = 1e-5
    epochs_per_batch: int = 5
    minibatches: int = 2
    grad_clip: float = 0.5
    hidden: int = 64
    rollout_ticks: int = 4096
    min_steps: int = 20_000
    max_steps: int = 200_000
    eval_every: int = 1

    # ablations
    no_predictor_update: bool = False
    no_baseline: bool = False
    fixed_beta: bool = False
    no_gate: bool = False
    no_reward_norm: bool = False

    # environment and evaluation
    reveal_current_tick: bool = False
    retrain_mode: str = "deterministic"
    t_max: int = 40
    activation_rollouts: int = 1

    def validate(self) -> "RunConfig":
        choices = {
            "data_source": ("synthetic", "csv"),
            "task": ("regression", "classification"),
            "predictor_kind": ("gbdt", "recurrent"),
            "cost_mode": ("simple", "complex"),
            "retrain_mode": ("sample", "deterministic"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if not self.c_max > 0:
            raise ConfigError("c_max must be positive")
        if self.data_source == "csv" and not (self.events_path and self.schema_path and self.labels_path):
            raise ConfigError("csv data needs events_path, schema_path and labels_path")
        if self.t_max < 1 or self.eval_every < 1:
            raise ConfigError("t_max and eval_every must be >= 1")
        return self

    @property
    def fractions(self) -> tuple[float, float, float]:
        return self.train_fraction, self.val_fraction, self.test_fraction

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if math.isinf(d["c_max"]):
            d["c_max"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {k: _coerce(k, known[k].type, v) for k, v in d.items()}
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path, **overrides) -> "RunConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError("config file must be a flat key: value mapping")
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(raw)

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True), encoding="utf-8")


def _coerce(key, annotation, value):
    if isinstance(value, (dict, list)):
        raise ConfigError(f"{key}: nested values are not allowed")
    ann = str(annotation)
    if value is None:
        if "None" in ann:
            return None
        raise ConfigError(f"{key} may not be empty")
    try:
        if ann.startswith("bool"):
            if isinstance(value, str):
                low = value.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return low in ("true", "1", "yes")
            return bool(value)
        if ann.startswith("int"):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if ann.startswith("float"):
            return float(value)  # accepts "inf"
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {ann}") from None
