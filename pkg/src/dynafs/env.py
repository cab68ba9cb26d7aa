"""Acquisition environment: the policy sees masked states, never the raw features.

State column ``c`` (``1 <= c <= N_T``) is produced by the action ``a[:, c-1]``::

    s[:, c] = s[:, c-1] * (1 - a) + x[:, c-1] * a

and column 0 is the constant fill. Labels are aligned to columns by
:func:`column_targets`: by default column ``c`` predicts ``y[c]`` (a fetched
value arrives one tick late); with ``reveal_current_tick`` column ``c``
predicts ``y[c-1]``, so a fetch returns the value of the tick being predicted.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import FILL_VALUE
from .data import EpisodeData, FeatureSpec
from .errors import DataError

SAMPLE = "sample"
DETERMINISTIC = "deterministic"


def initial_state(n_features: int) -> np.ndarray:
    return np.full(n_features, FILL_VALUE)


def transition(s_prev: np.ndarray, x_prev: np.ndarray, action: np.ndarray) -> np.ndarray:
    a = np.asarray(action, dtype=bool)
    return np.where(a, x_prev, s_prev)


def column_targets(y: np.ndarray, reveal_current_tick: bool = False) -> np.ndarray:
    """Labels aligned to the N_T + 1 state columns, NaN where a column has none."""
    y = np.asarray(y, dtype=float)
    out = np.full(y.size + 1, np.nan)
    if reveal_current_tick:
        out[1:] = y
    else:
        out[:-1] = y
    return out


def states_from_actions(x: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """All N_T + 1 state columns for one episode given its full action matrix."""
    x = np.asarray(x, dtype=float)
    a = np.asarray(actions, dtype=bool)
    nf, nt = x.shape
    if a.shape != (nf, nt):
        raise DataError(f"actions {a.shape} do not match features {x.shape}")
    idx = np.where(a, np.arange(nt), -1)
    last = np.maximum.accumulate(idx, axis=1)
    vals = np.take_along_axis(x, np.maximum(last, 0), axis=1)
    s = np.empty((nf, nt + 1))
    s[:, 0] = FILL_VALUE
    s[:, 1:] = np.where(last >= 0, vals, FILL_VALUE)
    return s


class AcquisitionEnv:
    """Single-episode environment with an explicit cursor."""

    def __init__(self):
        self._x = None
        self._s = None
        self.t = 0

    @property
    def done(self) -> bool:
        return self._x is not None and self.t >= self._x.shape[1]

    def reset(self, episode: EpisodeData) -> np.ndarray:
        self._x = episode.x
        self._s = initial_state(episode.n_features)
        self.t = 0
        return self._s.copy()

    def step(self, action) -> tuple[np.ndarray, bool]:
        if self._x is None:
            raise DataError("step called before reset")
        if self.done:
            raise DataError("episode is finished; call reset")
        a = np.asarray(action, dtype=bool)
        if a.shape != self._s.shape:
            raise DataError(f"action shape {a.shape}, expected {self._s.shape}")
        self._s = transition(self._s, self._x[:, self.t], a)
        self.t += 1
        return self._s.copy(), self.done


class Policy(Protocol):
    """Anything that emits per-feature selection probabilities tick by tick."""

    n_features: int

    def begin(self, batch: int): ...

    def probs_step(self, obs_prev: np.ndarray, act_prev: np.ndarray, state): ...


class ConstantPolicy:
    """Fixed selection probability for every feature (always/never-fetch and random policies)."""

    def __init__(self, n_features: int, p: float | np.ndarray):
        self.n_features = n_features
        self.p = np.broadcast_to(np.asarray(p, dtype=float), (n_features,))

    def begin(self, batch: int):
        return None

    def probs_step(self, obs_prev, act_prev, state):
        return np.broadcast_to(self.p, obs_prev.shape).copy(), state


@dataclass
class BatchRollout:
    """Padded rollout of B episodes: states (B, T+1, F), actions and probs (B, T, F)."""

    states: np.ndarray
    actions: np.ndarray
    probs: np.ndarray
    lengths: np.ndarray
    episode_index: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        """(B, T) mask of real decision ticks."""
        return np.arange(self.actions.shape[1])[None, :] < self.lengths[:, None]

    def episode(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """(states (F, T_i+1), actions (F, T_i)) of the i-th episode in the batch."""
        n = self.lengths[i]
        return self.states[i, : n + 1].T.copy(), self.actions[i, :n].T.copy()


def pad_episodes(episodes: Sequence[EpisodeData]):
    lengths = np.array([e.n_ticks for e in episodes])
    nf = episodes[0].n_features
    X = np.zeros((len(episodes), lengths.max(), nf))
    for i, e in enumerate(episodes):
        X[i, : e.n_ticks] = e.x.T
    return X, lengths


def choose(probs: np.ndarray, mode: str, rng: np.random.Generator | None) -> np.ndarray:
    if mode == DETERMINISTIC:
        return probs >= 0.5
    if mode == SAMPLE:
        return rng.random(probs.shape) < probs
    raise DataError(f"unknown action mode {mode!r}")


def rollout_batch(episodes: Sequence[EpisodeData], policy, mode: str = SAMPLE,
                  rng: np.random.Generator | None = None, index=None) -> BatchRollout:
    """Step every episode in lockstep; padded ticks past an episode's end are inert."""
    X, lengths = pad_episodes(episodes)
    B, T, F = X.shape
    if F != policy.n_features:
        raise DataError(f"policy expects {policy.n_features} features, data has {F}")
    S = np.empty((B, T + 1, F))
    S[:, 0] = FILL_VALUE
    A = np.zeros((B, T, F), dtype=bool)
    P = np.empty((B, T, F))
    state = policy.begin(B)
    act_prev = np.zeros((B, F))
    for t in range(T):
        probs, state = policy.probs_step(S[:, t], act_prev, state)
        a = choose(probs, mode, rng)
        live = (t < lengths)[:, None]
        a &= live
        P[:, t] = probs
        A[:, t] = a
        S[:, t + 1] = np.where(a, X[:, t], S[:, t])
        act_prev = a.astype(float)
    idx = np.arange(B) if index is None else np.asarray(index)
    return BatchRollout(S, A, P, lengths, idx)


@dataclass
class SynthesizedEpisode:
    subject_id: str
    states: np.ndarray   # (F, T+1)
    actions: np.ndarray  # (F, T)


def synthesize_states(episodes: Sequence[EpisodeData], policy, mode: str = DETERMINISTIC,
                      seed: int = 0, batch_size: int = 512) -> list[SynthesizedEpisode]:
    """Roll ``policy`` over every episode and keep the masked states and actions."""
    rng = np.random.default_rng(seed)
    out = []
    for start in range(0, len(episodes), batch_size):
        chunk = episodes[start:start + batch_size]
        ro = rollout_batch(chunk, policy, mode, rng)
        for i, e in enumerate(chunk):
            s, a = ro.episode(i)
            out.append(SynthesizedEpisode(e.subject_id, s, a))
    return out


def export_synthesized(episodes: Sequence[SynthesizedEpisode], specs: Sequence[FeatureSpec],
                       events_path, mask_path, tick_hours: float = 0.5) -> None:
    """Write masked states in the events CSV layout plus a per-tick action sidecar.

    State column ``c`` is written at time ``c * tick_hours``; the sidecar has one
    row per (subject, tick, feature) with the 0/1 action that produced column
    ``tick + 1``.
    """
    names = [s.name for s in specs]
    with Path(events_path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "feature_name", "time_hours", "value"])
        for e in episodes:
            for k, name in enumerate(names):
                for c in range(e.states.shape[1]):
                    w.writerow([e.subject_id, name, repr(c * tick_hours), repr(float(e.states[k, c]))])
    with Path(mask_path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "tick", "feature_name", "action"])
        for e in episodes:
            for t in range(e.actions.shape[1]):
                for k, name in enumerate(names):
                    w.writerow([e.subject_id, t, name, int(e.actions[k, t])])
