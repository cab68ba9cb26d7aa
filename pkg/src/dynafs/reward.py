"""Prediction and cost rewards, the cost gate, and the cost-coefficient schedule.

Sign convention: rewards are positive for better-than-baseline prediction and
negative for acquisition cost. ``literal_signs`` flips both (improvement
negative, cost positive) for comparison only.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass
class RewardConfig:
    alpha: float = 10.0
    beta: float = 5.0
    delta_beta: float = 5.0
    c_base: float = 0.2
    l_eps: float = 1.0
    ema_coeff: float = 0.95
    plateau_threshold: float = 0.5  # validation-cost decrease per 1e6 steps
    plateau_window: int = 3
    literal_signs: bool = False

    def validate(self) -> "RewardConfig":
        for name in ("alpha", "beta", "delta_beta", "l_eps", "plateau_threshold"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.c_base < 0:
            raise ConfigError("c_base must be nonnegative")
        if not 0.0 <= self.ema_coeff < 1.0:
            raise ConfigError("ema_coeff must lie in [0, 1)")
        if self.plateau_window < 2:
            raise ConfigError("plateau_window must be at least 2")
        return self


def regression_reward(l_pred, l_baseline, l_eps: float = 1.0, literal_sign: bool = False):
    """(l_baseline - l_pred) / max(l_baseline, l_eps); works elementwise."""
    l_pred = np.asarray(l_pred, dtype=float)
    l_base = np.asarray(l_baseline, dtype=float)
    r = (l_base - l_pred) / np.maximum(l_base, l_eps)
    r = -r if literal_sign else r
    return float(r) if r.ndim == 0 else r


def classification_reward(p_i, p_j, y_i):
    """y_i * (p_i - p_j) for a partner j of the opposite label."""
    r = np.asarray(y_i, dtype=float) * (np.asarray(p_i, dtype=float) - np.asarray(p_j, dtype=float))
    return float(r) if r.ndim == 0 else r


def pair_assignments(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray | None:
    """For each tick, the index of a uniformly drawn tick with the opposite label.

    Returns None when the batch holds a single class.
    """
    y = np.asarray(labels)
    pos = np.flatnonzero(y > 0)
    neg = np.flatnonzero(y <= 0)
    if pos.size == 0 or neg.size == 0:
        return None
    partner = np.empty(y.size, dtype=np.intp)
    is_pos = y > 0
    partner[is_pos] = neg[rng.integers(0, neg.size, size=int(is_pos.sum()))]
    partner[~is_pos] = pos[rng.integers(0, pos.size, size=int((~is_pos).sum()))]
    return partner


def classification_rewards(preds: np.ndarray, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Pairwise rewards for a flat batch of labeled ticks (labels in {-1, +1})."""
    y = np.where(np.asarray(labels) > 0, 1.0, -1.0)
    partner = pair_assignments(y, rng)
    if partner is None:
        log.warning("rollout batch holds a single class; prediction rewards set to 0")
        return np.zeros(y.size)
    p = np.asarray(preds, dtype=float)
    return classification_reward(p, p[partner], y)


def normalize_pred_rewards(raw) -> np.ndarray:
    """Divide by the batch mean absolute value; an all-zero batch stays zero."""
    r = np.asarray(raw, dtype=float)
    scale = np.mean(np.abs(r)) if r.size else 0.0
    if scale == 0.0:
        return np.zeros_like(r)
    return r / scale


def gate(c_train: float, c_max: float, alpha: float) -> float:
    """1 / (1 + exp(alpha * (1 - c_train / c_max))); an infinite c_max gives the c_train = 0 value."""
    if not c_max > 0:
        raise ConfigError("c_max must be positive")
    ratio = 0.0 if math.isinf(c_max) else c_train / c_max
    z = alpha * (1.0 - ratio)
    # numerically stable logistic of -z
    if z >= 0:
        e = math.exp(-z)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(z))


def cost_reward(step_costs, n_features: int, beta: float, gate_value: float, c_base: float,
                selected=None, literal_sign: bool = False):
    """-gate * (beta * sum(costs) / N_F + c_base * [any selection]).

    ``step_costs`` is a per-feature vector for one tick, or an array whose last
    axis is the feature axis. ``selected`` (same shape, boolean) decides the
    "any selection" term; without it a positive cost marks a selection, which
    misses a free re-fetch of a static feature.
    """
    c = np.asarray(step_costs, dtype=float)
    sel = c > 0 if selected is None else np.asarray(selected, dtype=bool)
    r = -gate_value * (beta * c.sum(axis=-1) / n_features + c_base * sel.any(axis=-1))
    r = -r if literal_sign else r
    return float(r) if np.ndim(r) == 0 else r


def beta_step(beta: float, delta_beta: float) -> float:
    return min(1.5 * beta, beta + delta_beta)


def update_beta(validation_costs, steps_elapsed, config: RewardConfig) -> float:
    """Raise beta when validation cost has stopped falling.

    ``validation_costs`` and ``steps_elapsed`` are the most recent window of
    evaluations (at least ``plateau_window``). The decrease rate is measured
    from the first to the last entry, per 1e6 environment steps.
    """
    costs = np.asarray(validation_costs, dtype=float)[-config.plateau_window:]
    steps = np.asarray(steps_elapsed, dtype=float)[-config.plateau_window:]
    if costs.size < config.plateau_window:
        return config.beta
    span = steps[-1] - steps[0]
    rate = (costs[0] - costs[-1]) / span * 1e6 if span > 0 else 0.0
    if rate < config.plateau_threshold:
        return beta_step(config.beta, config.delta_beta)
    return config.beta


def update_c_train(c_train: float | None, batch_mean_cost: float, ema_coeff: float) -> float:
    """Exponential smoothing; the first batch initializes the average."""
    if c_train is None:
        return float(batch_mean_cost)
    return ema_coeff * c_train + (1.0 - ema_coeff) * batch_mean_cost
