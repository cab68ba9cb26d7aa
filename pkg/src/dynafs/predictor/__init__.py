"""Label predictors over acquisition-masked states.

Every predictor maps a batch of state sequences ``S`` shaped
``(batch, columns, features)`` to one prediction per column via
:meth:`StatePredictor.predict_states`. Tree and linear predictors look at the
current column only; the recurrent predictor reads the causal prefix.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..data import CLASSIFICATION, REGRESSION
from ..errors import DataError
from . import gbdt as _gbdt
from . import linear as _linear
from . import recurrent as _recurrent
from .gbdt import GbdtConfig, GbdtEnsemble, GbdtModel, fit_gbdt, fit_gbdt_ensemble, predict_gbdt
from .recurrent import RecurrentConfig, RecurrentPredictor, fit_recurrent, predict_recurrent

KINDS = ("gbdt", "recurrent", "linear", "logistic")
FORMAT = "dynafs-predictor"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ClassWeights:
    w_neg: float
    w_pos: float

    def as_tuple(self):
        return self.w_neg, self.w_pos

    def per_sample(self, labels: np.ndarray) -> np.ndarray:
        return np.where(np.asarray(labels) > 0, self.w_pos, self.w_neg)


def class_weights(labels) -> ClassWeights:
    """Inverse-frequency weights: w_neg = N_pos/N, w_pos = N_neg/N."""
    y = np.asarray(labels, dtype=float)
    y = y[~np.isnan(y)]
    n_pos = int(np.sum(y > 0))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("class weights need both classes present")
    total = n_pos + n_neg
    return ClassWeights(n_pos / total, n_neg / total)


def model_task(task: str) -> str:
    """Map a dataset task name onto the predictor head type."""
    if task == CLASSIFICATION:
        return _gbdt.BINARY
    if task == REGRESSION:
        return _gbdt.REGRESSION
    if task in (_gbdt.BINARY, _gbdt.REGRESSION):
        return task
    raise DataError(f"unknown task {task!r}")


@dataclass
class PredictorConfig:
    kind: str = "gbdt"
    gbdt: GbdtConfig = field(default_factory=GbdtConfig)
    recurrent: RecurrentConfig = field(default_factory=RecurrentConfig)
    balance_classes: bool = True


class StatePredictor:
    """Uniform wrapper: ``predict_states`` (B, C, F) -> (B, C)."""

    def __init__(self, kind: str, model, task: str, n_features: int):
        if kind not in KINDS:
            raise DataError(f"unknown predictor kind {kind!r}")
        self.kind, self.model, self.task, self.n_features = kind, model, model_task(task), n_features

    @property
    def is_binary(self) -> bool:
        return self.task == _gbdt.BINARY

    def predict_states(self, S: np.ndarray) -> np.ndarray:
        S = np.asarray(S, dtype=float)
        if S.ndim != 3 or S.shape[2] != self.n_features:
            raise DataError(f"expected states (batch, columns, {self.n_features}), got {S.shape}")
        if np.isnan(S).any():
            raise DataError("NaN in predictor input")
        if self.kind == "recurrent":
            return self.model.predict_sequences(S)
        B, C, F = S.shape
        return self.model.predict(S.reshape(B * C, F)).reshape(B, C)

    def predict_rows(self, X: np.ndarray) -> np.ndarray:
        """Per-row predictions for the column-wise kinds."""
        if self.kind == "recurrent":
            raise DataError("the recurrent predictor needs sequences, not rows")
        return self.model.predict(np.asarray(X, dtype=float))

    def to_dict(self) -> dict:
        if isinstance(self.model, GbdtEnsemble):
            body = {"ensemble": self.model.to_dict()}
        else:
            body = self.model.to_dict()
        return {"format": FORMAT, "version": FORMAT_VERSION, "kind": self.kind, "task": self.task,
                "n_features": self.n_features, "params": body}

    @classmethod
    def from_dict(cls, d: dict) -> "StatePredictor":
        if d.get("format") != FORMAT or d.get("version") != FORMAT_VERSION:
            raise DataError(f"unsupported predictor file (format {d.get('format')!r}, version {d.get('version')!r})")
        kind, body = d["kind"], d["params"]
        if kind == "gbdt":
            model = GbdtEnsemble.from_dict(body["ensemble"]) if "ensemble" in body else GbdtModel.from_dict(body)
        elif kind == "recurrent":
            model = RecurrentPredictor.from_dict(body)
        else:
            model = _linear.LinearModel.from_dict(body)
        return cls(kind, model, d["task"], int(d["n_features"]))


def save_predictor(pred: StatePredictor, path) -> None:
    Path(path).write_text(json.dumps(pred.to_dict()))


def load_predictor(path) -> StatePredictor:
    return StatePredictor.from_dict(json.loads(Path(path).read_text()))


def fit_predictor(states, targets, task: str, config: PredictorConfig | None = None,
                  val=None, seed: int | None = None) -> StatePredictor:
    """Fit a predictor on state sequences.

    ``states`` is a list of (C_i, F) arrays and ``targets`` a list of (C_i,)
    arrays with NaN at columns that carry no label. ``val`` is an optional
    ``(states, targets)`` pair (used by the recurrent kind for epoch selection).
    """
    from dataclasses import replace

    config = config or PredictorConfig()
    head = model_task(task)
    nf = states[0].shape[1]
    y_all = np.concatenate([np.asarray(t, float) for t in targets])
    weights = None
    if head == _gbdt.BINARY and config.balance_classes:
        weights = class_weights(y_all)

    if config.kind == "recurrent":
        rc = replace(config.recurrent, task=head, seed=config.recurrent.seed if seed is None else seed)
        model = fit_recurrent(states, targets, rc, val=val, class_weight=weights.as_tuple() if weights else None)
        return StatePredictor("recurrent", model, head, nf)

    X = np.concatenate(states)
    keep = ~np.isnan(y_all)
    X, y = X[keep], y_all[keep]
    sw = weights.per_sample(y) if weights else None
    if config.kind == "gbdt":
        gc = replace(config.gbdt, task=head, seed=config.gbdt.seed if seed is None else seed)
        model = fit_gbdt_ensemble(X, y, gc, sample_weight=sw)
    elif config.kind == "linear":
        if head != _gbdt.REGRESSION:
            raise DataError("the linear predictor is regression-only; use 'logistic'")
        model = _linear.fit_linear(X, y, sw)
    elif config.kind == "logistic":
        if head != _gbdt.BINARY:
            raise DataError("the logistic predictor is classification-only; use 'linear'")
        model = _linear.fit_logistic(X, y, sw)
    else:
        raise DataError(f"unknown predictor kind {config.kind!r}")
    return StatePredictor(config.kind, model, head, nf)


__all__ = [
    "ClassWeights", "GbdtConfig", "GbdtModel", "GbdtEnsemble", "PredictorConfig", "RecurrentConfig",
    "RecurrentPredictor", "StatePredictor", "class_weights", "fit_gbdt", "fit_gbdt_ensemble", "fit_predictor",
    "fit_recurrent", "load_predictor", "model_task", "predict_gbdt", "predict_recurrent", "save_predictor",
]
