"""Recurrent actor-critic with per-feature Bernoulli heads, trained by clipped PPO.

Decision ``t`` of an episode (producing state column ``t + 1``) is taken from
the previous state column and the previous action vector. The actor emits two
logits per feature; the selection probability is the softmax weight of the
second one. Advantages are used exactly as computed (no normalization).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, TrainingError
from .nn import LstmHead, adam_init, adam_step, clip_grad_norm, sigmoid

__all__ = [
    "ActorNet", "CriticNet", "PpoConfig", "RolloutBuffer", "DiagnosticsWriter", "adam_step", "gae",
    "joint_log_prob", "ppo_update", "sample_actions",
]

INIT_SELECT_PROB = 0.8
_P_FLOOR = 1e-12


@dataclass
class PpoConfig:
    gamma: float = 0.8
    lam: float = 0.95
    clip_eps: float = 0.2
    lr: float = 1e-3
    adam_eps: float = 1e-5
    epochs_per_batch: int = 5
    minibatches: int = 2
    grad_clip: float = 0.5
    hidden: int = 64
    rollout_ticks: int = 4096
    min_steps: int = 20_000
    max_steps: int = 200_000
    seed: int = 0

    def validate(self) -> "PpoConfig":
        if not self.clip_eps > 0:
            raise ConfigError("clip_eps must be positive")
        if not (0 < self.gamma <= 1 and 0 < self.lam <= 1):
            raise ConfigError("gamma and lambda must lie in (0, 1]")
        if self.minibatches < 1 or self.epochs_per_batch < 0 or self.rollout_ticks < 1:
            raise ConfigError("minibatches and rollout_ticks must be positive")
        if self.min_steps > self.max_steps:
            raise ConfigError("min_steps exceeds max_steps")
        return self


# -------------------------------------------------------------------- networks


class ActorNet:
    """LSTM over (previous state column, previous action) emitting (N_F, 2) logits."""

    def __init__(self, n_features: int, hidden: int = 64, rng: np.random.Generator | None = None,
                 init_prob: float = INIT_SELECT_PROB, net: LstmHead | None = None):
        self.n_features = n_features
        if net is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            net = LstmHead(2 * n_features, hidden, 2 * n_features, rng, out_scale=0.01)
            # logit gap log(p / (1 - p)) puts the fresh actor at init_prob
            net.params["bo"][1::2] = math.log(init_prob / (1.0 - init_prob))
        self.net = net

    @staticmethod
    def inputs(states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Actor inputs (B, T, 2F) from padded states (B, T+1, F) and actions (B, T, F)."""
        prev_a = np.zeros(actions.shape)
        prev_a[:, 1:] = actions[:, :-1]
        return np.concatenate([states[:, :-1], prev_a], axis=2)

    def _check(self):
        if not self.net.check_finite():
            raise TrainingError("actor parameters contain NaN or inf")

    def logits(self, X: np.ndarray):
        out, cache = self.net.forward(X)
        return out.reshape(out.shape[0], out.shape[1], self.n_features, 2), cache

    def forward(self, X: np.ndarray):
        """Selection probabilities (B, T, F) for a full input history (B, T, 2F)."""
        self._check()
        lg, cache = self.logits(X)
        return sigmoid(lg[..., 1] - lg[..., 0]), cache

    def actor_forward(self, obs_history: np.ndarray, action_history: np.ndarray) -> np.ndarray:
        """Probabilities for one episode: obs (T, F) previous columns, actions (T, F) previous actions."""
        X = np.concatenate([np.asarray(obs_history, float), np.asarray(action_history, float)], axis=1)
        return self.forward(X[None])[0][0]

    # streaming interface used by env.rollout_batch
    def begin(self, batch: int):
        self._check()
        return self.net.initial_state(batch)

    def probs_step(self, obs_prev, act_prev, state):
        out, state = self.net.step(np.concatenate([obs_prev, act_prev], axis=1), state)
        lg = out.reshape(out.shape[0], self.n_features, 2)
        return sigmoid(lg[..., 1] - lg[..., 0]), state

    def to_dict(self):
        return {"n_features": self.n_features, "net": self.net.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["n_features"], net=LstmHead.from_dict(d["net"]))


class CriticNet:
    """LSTM over the previous state column emitting one value per decision."""

    def __init__(self, n_features: int, hidden: int = 64, rng: np.random.Generator | None = None,
                 net: LstmHead | None = None):
        self.n_features = n_features
        if net is None:
            rng = rng if rng is not None else np.random.default_rng(1)
            net = LstmHead(n_features, hidden, 1, rng)
        self.net = net

    @staticmethod
    def inputs(states: np.ndarray) -> np.ndarray:
        return states[:, :-1]

    def forward(self, X: np.ndarray):
        out, cache = self.net.forward(X)
        return out[..., 0], cache

    def to_dict(self):
        return {"n_features": self.n_features, "net": self.net.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["n_features"], net=LstmHead.from_dict(d["net"]))


# ------------------------------------------------------------------- sampling


def joint_log_prob(probs: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Sum over the last (feature) axis of the per-feature Bernoulli log-likelihoods."""
    p = np.clip(np.asarray(probs, dtype=float), _P_FLOOR, 1.0 - _P_FLOOR)
    a = np.asarray(actions, dtype=bool)
    return np.sum(np.where(a, np.log(p), np.log1p(-p)), axis=-1)


def sample_actions(probs: np.ndarray, rng: np.random.Generator):
    """Independent Bernoulli draws and their joint log-probability."""
    p = np.asarray(probs, dtype=float)
    a = rng.random(p.shape) < p
    return a, joint_log_prob(p, a)


# ------------------------------------------------------------------------ GAE


def gae(rewards, values, terminal, gamma: float, lam: float):
    """Generalized advantage estimates over a flat tick sequence.

    ``terminal[t]`` marks the last tick of an episode; the value after it is 0.
    Returns (advantages, returns = advantages + values).
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    done = np.asarray(terminal, dtype=bool)
    adv = np.zeros_like(r)
    running = 0.0
    for t in range(r.size - 1, -1, -1):
        nxt = 0.0 if done[t] or t == r.size - 1 else v[t + 1]
        if done[t]:
            running = 0.0
        delta = r[t] + gamma * nxt - v[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv, adv + v


def gae_padded(rewards, values, valid, gamma: float, lam: float):
    """GAE for padded (B, T) arrays; each row is one episode ending at its last valid tick."""
    B, T = rewards.shape
    adv = np.zeros((B, T))
    running = np.zeros(B)
    next_v = np.zeros(B)
    for t in range(T - 1, -1, -1):
        live = valid[:, t]
        delta = rewards[:, t] + gamma * next_v - values[:, t]
        running = np.where(live, delta + gamma * lam * running, 0.0)
        next_v = np.where(live, values[:, t], 0.0)
        adv[:, t] = running
    return adv, np.where(valid, adv + values, 0.0)


# --------------------------------------------------------------------- buffer


@dataclass
class RolloutBuffer:
    """One batch of whole episodes, padded to (B, T)."""

    actor_in: np.ndarray   # (B, T, 2F)
    critic_in: np.ndarray  # (B, T, F)
    actions: np.ndarray    # (B, T, F) bool
    logp: np.ndarray       # (B, T)
    values: np.ndarray     # (B, T)
    rewards: np.ndarray    # (B, T)
    valid: np.ndarray      # (B, T) bool
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @property
    def n_ticks(self) -> int:
        return int(self.valid.sum())

    def compute_advantages(self, gamma: float, lam: float) -> None:
        self.advantages, self.returns = gae_padded(self.rewards, self.values, self.valid, gamma, lam)

    def check(self) -> None:
        B, T = self.valid.shape
        for name in ("logp", "values", "rewards"):
            if getattr(self, name).shape != (B, T):
                raise TrainingError(f"buffer field {name} has shape {getattr(self, name).shape}, expected {(B, T)}")
        if self.advantages is None:
            raise TrainingError("advantages must be computed before an update")


# ---------------------------------------------------------------- PPO update


def actor_loss_and_grads(actor: ActorNet, X, actions, logp_old, adv, valid, clip_eps: float):
    """Clipped-surrogate loss averaged over valid ticks, and its parameter gradients."""
    probs, cache = actor.forward(X)
    logp = joint_log_prob(probs, actions)
    ratio = np.exp(np.where(valid, logp - logp_old, 0.0))
    if not np.all(np.isfinite(ratio)):
        raise TrainingError(f"PPO ratio is not finite (max log-ratio {np.nanmax(logp - logp_old):.3g})")
    n = max(int(valid.sum()), 1)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    loss = -float(np.sum(np.where(valid, np.minimum(unclipped, clipped), 0.0)) / n)
    # gradient flows only through the unclipped branch strictly inside the trust region
    active = valid & (((adv > 0) & (ratio < 1.0 + clip_eps)) | ((adv < 0) & (ratio > 1.0 - clip_eps)))
    d_logp = np.where(active, -ratio * adv / n, 0.0)
    dz = d_logp[..., None] * (actions.astype(float) - probs)  # d logp / d (l1 - l0) = a - p
    d_out = np.empty(probs.shape + (2,))
    d_out[..., 1] = dz
    d_out[..., 0] = -dz
    grads, _ = actor.net.backward(d_out.reshape(d_out.shape[0], d_out.shape[1], -1), cache)
    clip_frac = float(np.sum(valid & (np.abs(ratio - 1.0) > clip_eps)) / n)
    return loss, grads, {"clip_frac": clip_frac, "approx_kl": float(np.sum(np.where(valid, logp_old - logp, 0)) / n)}


def critic_loss_and_grads(critic: CriticNet, X, returns, valid):
    v, cache = critic.forward(X)
    n = max(int(valid.sum()), 1)
    err = np.where(valid, v - returns, 0.0)
    loss = float(np.sum(err * err) / n)
    grads, _ = critic.net.backward((2.0 * err / n)[..., None], cache)
    return loss, grads


@dataclass
class PpoOptimizer:
    actor_state: dict
    critic_state: dict

    @classmethod
    def create(cls, actor: ActorNet, critic: CriticNet) -> "PpoOptimizer":
        return cls(adam_init(actor.net.params), adam_init(critic.net.params))


def ppo_update(buffer: RolloutBuffer, actor: ActorNet, critic: CriticNet, config: PpoConfig,
               optimizer: PpoOptimizer | None = None, rng: np.random.Generator | None = None) -> dict:
    """Several epochs of minibatch clipped-PPO updates; minibatches hold whole episodes."""
    buffer.check()
    optimizer = optimizer or PpoOptimizer.create(actor, critic)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    B = buffer.valid.shape[0]
    n_mb = min(config.minibatches, B)
    stats = {"actor_loss": [], "critic_loss": [], "clip_frac": [], "approx_kl": [], "grad_norm": []}
    for _ in range(config.epochs_per_batch):
        for idx in np.array_split(rng.permutation(B), n_mb):
            idx = np.sort(idx)
            valid = buffer.valid[idx]
            T = int(valid.sum(axis=1).max())
            sl = (idx, slice(0, T))
            a_loss, a_grads, extra = actor_loss_and_grads(
                actor, buffer.actor_in[sl], buffer.actions[sl], buffer.logp[sl], buffer.advantages[sl],
                valid[:, :T], config.clip_eps)
            c_loss, c_grads = critic_loss_and_grads(critic, buffer.critic_in[sl], buffer.returns[sl], valid[:, :T])
            stats["grad_norm"].append(clip_grad_norm(a_grads, config.grad_clip))
            clip_grad_norm(c_grads, config.grad_clip)
            adam_step(actor.net.params, a_grads, optimizer.actor_state, config.lr, config.adam_eps)
            adam_step(critic.net.params, c_grads, optimizer.critic_state, config.lr, config.adam_eps)
            stats["actor_loss"].append(a_loss)
            stats["critic_loss"].append(c_loss)
            stats["clip_frac"].append(extra["clip_frac"])
            stats["approx_kl"].append(extra["approx_kl"])
    return {k: float(np.mean(v)) if v else 0.0 for k, v in stats.items()}


# ---------------------------------------------------------------- diagnostics


@dataclass
class DiagnosticsWriter:
    """Appends one JSON object per line; ``path=None`` keeps records in memory only."""

    path: Path | None = None
    records: list = field(default_factory=list)

    def __post_init__(self):
        if self.path is not None:
            self.path = Path(self.path)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        clean = {k: (float(v) if isinstance(v, (np.floating, np.integer)) else v) for k, v in record.items()}
        self.records.append(clean)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(clean, sort_keys=True) + "\n")
