"""LSTM label predictor trained by BPTT with the package's own gradients."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from ..errors import TrainingError
from ..nn import LstmHead, adam_init, adam_step, clip_grad_norm

REGRESSION = "regression"
BINARY = "binary"


@dataclass
class RecurrentConfig:
    hidden: int = 32
    epochs: int = 20
    lr: float = 1e-3
    min_lr: float = 1e-4
    batch_size: int = 64
    grad_clip: float = 5.0
    adam_eps: float = 1e-8
    task: str = REGRESSION
    seed: int = 0


def lr_schedule(lr0: float, progress: float, min_lr: float = 1e-4) -> float:
    """max(min_lr, lr0 * (1 - progress**2)) for progress in [0, 1]."""
    return max(min_lr, lr0 * (1.0 - progress ** 2))


def pad_sequences(seqs, fill=0.0):
    lengths = np.array([len(s) for s in seqs])
    width = seqs[0].shape[1] if seqs[0].ndim == 2 else None
    T = int(lengths.max())
    shape = (len(seqs), T) + ((width,) if width is not None else ())
    out = np.full(shape, fill, dtype=float)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


@dataclass
class RecurrentPredictor:
    net: LstmHead
    task: str
    history: list = field(default_factory=list)

    @property
    def n_features(self) -> int:
        return self.net.n_in

    def _outputs(self, X):
        out, cache = self.net.forward(X)
        if self.task == BINARY:
            z = out[..., 1] - out[..., 0]
            return 1.0 / (1.0 + np.exp(-z)), out, cache
        return out[..., 0], out, cache

    def predict_sequences(self, X: np.ndarray) -> np.ndarray:
        """Per-tick predictions for a padded batch (B, T, F) -> (B, T)."""
        return self._outputs(np.asarray(X, dtype=float))[0]

    def loss_and_grads(self, X, targets, class_weight=None):
        """Masked loss on a padded batch; ``targets`` is (B, T) with NaN where unlabeled."""
        pred, out, cache = self._outputs(X)
        mask = ~np.isnan(targets)
        y = np.where(mask, targets, 0.0)
        d_out = np.zeros_like(out)
        if self.task == BINARY:
            pos = y > 0
            wn, wp = class_weight if class_weight is not None else (1.0, 1.0)
            w = np.where(mask, np.where(pos, wp, wn), 0.0)
            total = w.sum()
            p = np.clip(pred, 1e-12, 1 - 1e-12)
            loss = float(-np.sum(w * np.where(pos, np.log(p), np.log(1 - p))) / total)
            # dL/dz for z = logit_pos - logit_neg
            dz = w * (pred - pos) / total
            d_out[..., 1] = dz
            d_out[..., 0] = -dz
        else:
            n = mask.sum()
            err = np.where(mask, pred - y, 0.0)
            loss = float(np.abs(err).sum() / n)
            d_out[..., 0] = np.sign(err) / n
        grads, _ = self.net.backward(d_out, cache)
        return loss, grads

    def loss(self, X, targets, class_weight=None) -> float:
        return self.loss_and_grads(X, targets, class_weight)[0]

    def to_dict(self):
        return {"task": self.task, "net": self.net.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(LstmHead.from_dict(d["net"]), d["task"])


def init_recurrent(n_features: int, config: RecurrentConfig) -> RecurrentPredictor:
    rng = np.random.default_rng(config.seed)
    n_out = 2 if config.task == BINARY else 1
    return RecurrentPredictor(LstmHead(n_features, config.hidden, n_out, rng), config.task)


def fit_recurrent(sequences, targets, config: RecurrentConfig | None = None, val=None,
                  class_weight=None) -> RecurrentPredictor:
    """Train on variable-length sequences.

    ``sequences`` is a list of (T_i, F) arrays; ``targets`` a list of (T_i,)
    arrays with NaN at unlabeled ticks. ``val`` is an optional
    ``(sequences, targets)`` pair used to keep the best epoch.
    """
    config = config or RecurrentConfig()
    model = init_recurrent(sequences[0].shape[1], config)
    if config.epochs <= 0:
        return model
    rng = np.random.default_rng(config.seed + 1)
    opt = adam_init(model.net.params)
    val_batch = None
    if val is not None:
        vx, _ = pad_sequences(val[0])
        vy, _ = pad_sequences([np.asarray(t, float) for t in val[1]], fill=np.nan)
        val_batch = (vx, vy)
    best = (np.inf, None)
    n = len(sequences)
    total_steps = config.epochs * int(np.ceil(n / config.batch_size))
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            X, _ = pad_sequences([sequences[i] for i in idx])
            Y, _ = pad_sequences([np.asarray(targets[i], float) for i in idx], fill=np.nan)
            loss, grads = model.loss_and_grads(X, Y, class_weight)
            if not np.isfinite(loss):
                raise TrainingError(f"predictor loss diverged (NaN) at epoch {epoch}; lower the learning rate")
            clip_grad_norm(grads, config.grad_clip)
            lr = lr_schedule(config.lr, step / max(1, total_steps), config.min_lr)
            adam_step(model.net.params, grads, opt, lr, config.adam_eps)
            losses.append(loss)
            step += 1
        record = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val_batch is not None:
            record["val_loss"] = model.loss(*val_batch, class_weight)
            if record["val_loss"] < best[0]:
                best = (record["val_loss"], copy.deepcopy(model.net.params))
        model.history.append(record)
    if best[1] is not None:
        model.net.params = best[1]
    return model


def predict_recurrent(model: RecurrentPredictor, state_prefix: np.ndarray) -> np.ndarray:
    """One causal prediction per tick for a single (T, F) prefix."""
    X = np.asarray(state_prefix, dtype=float)
    return model.predict_sequences(X[None])[0]
