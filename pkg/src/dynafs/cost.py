"""Acquisition cost under the ``simple`` and ``complex`` settings.

simple:  every dynamic acquisition costs ``unit_cost``; a static feature costs
         ``unit_cost`` on its first acquisition only.
complex: dynamic acquisitions cost the feature's ``per_tick_cost``; a static
         feature costs ``obs_cost`` on its first acquisition only.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from enum import Enum
from importlib import resources
from typing import Sequence

import numpy as np

from .data import STATIC, DYNAMIC, FeatureSpec, SubjectStreams, load_schema
from .errors import ConfigError, DataError

STATIC_MAJORITY = 0.9


class CostMode(str, Enum):
    SIMPLE = "simple"
    COMPLEX = "complex"


@dataclass(frozen=True)
class CostReport:
    per_tick: np.ndarray
    total: float
    mean_per_tick: float


def _mode(mode) -> CostMode:
    try:
        return CostMode(mode)
    except ValueError:
        raise ConfigError(f"unknown cost mode {mode!r}") from None


def feature_costs(specs: Sequence[FeatureSpec], mode) -> np.ndarray:
    """Price of one acquisition per feature (first-fetch price for static features)."""
    mode = _mode(mode)
    if mode is CostMode.SIMPLE:
        return np.array([s.unit_cost for s in specs], dtype=float)
    return np.array([s.obs_cost if s.is_static else s.per_tick_cost for s in specs], dtype=float)


def static_mask(specs: Sequence[FeatureSpec]) -> np.ndarray:
    return np.array([s.is_static for s in specs], dtype=bool)


def charge(actions: np.ndarray, prices: np.ndarray, is_static: np.ndarray, time_axis: int) -> np.ndarray:
    """Per-entry cost of a boolean action array.

    ``prices`` and ``is_static`` broadcast along the feature axis; static
    entries are charged only where no earlier tick on ``time_axis`` selected
    them.
    """
    a = np.asarray(actions).astype(bool)
    prior = np.maximum.accumulate(a, axis=time_axis)
    prior = np.roll(prior, 1, axis=time_axis)
    first = [slice(None)] * a.ndim
    first[time_axis] = 0
    prior[tuple(first)] = False
    charged = np.where(is_static, a & ~prior, a)
    return charged * prices


def step_cost_vector(
    action_t: np.ndarray,
    action_history: np.ndarray,
    specs: Sequence[FeatureSpec],
    mode=CostMode.SIMPLE,
) -> np.ndarray:
    """Cost of each feature at one tick, given the (N_F, t) history of earlier actions."""
    a_t = np.asarray(action_t, dtype=bool)
    hist = np.asarray(action_history, dtype=bool)
    nf = len(specs)
    if hist.size == 0:
        hist = np.zeros((nf, 0), dtype=bool)
    if a_t.shape != (nf,) or hist.ndim != 2 or hist.shape[0] != nf:
        raise DataError(f"shape mismatch: action {a_t.shape}, history {hist.shape}, {nf} specs")
    seen = hist.any(axis=1)
    prices = feature_costs(specs, mode)
    charged = np.where(static_mask(specs), a_t & ~seen, a_t)
    return charged * prices


def episode_cost(actions: np.ndarray, specs: Sequence[FeatureSpec], mode=CostMode.SIMPLE) -> CostReport:
    a = np.asarray(actions)
    if a.ndim != 2 or a.shape[0] != len(specs):
        raise DataError(f"actions shape {a.shape} does not match {len(specs)} features")
    if a.dtype != bool and not np.isin(a, (0, 1)).all():
        raise DataError("actions must be boolean")
    costs = charge(a, feature_costs(specs, mode)[:, None], static_mask(specs)[:, None], time_axis=1)
    per_tick = costs.sum(axis=0)
    total = float(per_tick.sum())
    return CostReport(per_tick, total, total / a.shape[1])


def pooled_per_tick_cost(reports: Sequence[CostReport]) -> float:
    """Total cost over a set of episodes divided by their total tick count."""
    ticks = sum(r.per_tick.size for r in reports)
    return sum(r.total for r in reports) / ticks if ticks else 0.0


def _ticks_spanned(stream: SubjectStreams, tick_hours: float) -> int:
    times = np.concatenate([t for t, _ in stream.streams.values()])
    if stream.labels is not None:
        times = np.concatenate([times, stream.labels[0]])
    return int(math.floor((times.max() - times.min()) / tick_hours + 1e-9)) + 1


def derive_per_tick_costs(
    raw_streams: Sequence[SubjectStreams],
    specs: Sequence[FeatureSpec],
    tick_hours: float = 0.5,
) -> list[FeatureSpec]:
    """Re-derive static/dynamic kind and the frequency-weighted per-tick price.

    A feature is static when it has exactly one observation in more than 90%
    of sequences. A dynamic feature's per-tick price is
    ``obs_cost * mean_observations_per_sequence / mean_sequence_ticks``.
    """
    if not raw_streams:
        raise DataError("no sequences to estimate observation frequency from")
    mean_ticks = float(np.mean([_ticks_spanned(s, tick_hours) for s in raw_streams]))
    out = []
    for spec in specs:
        counts = np.array([s.streams[spec.name][0].size if spec.name in s.streams else 0 for s in raw_streams])
        if counts.sum() == 0:
            raise DataError(f"feature {spec.name!r} is never observed")
        if np.mean(counts == 1) > STATIC_MAJORITY:
            out.append(replace(spec, kind=STATIC, per_tick_cost=spec.obs_cost))
        else:
            rate = min(1.0, counts.mean() / mean_ticks)
            out.append(replace(spec, kind=DYNAMIC, per_tick_cost=spec.obs_cost * rate))
    return out


def load_cost_table() -> list[FeatureSpec]:
    """The per-observation price table for the clinical feature set, as a schema."""
    with resources.as_file(resources.files("dynafs") / "resources" / "clinical_costs.csv") as path:
        return load_schema(path)


def cost_table_categories() -> dict[str, str]:
    with resources.files("dynafs").joinpath("resources/clinical_costs.csv").open(encoding="utf-8") as fh:
        return {row["name"]: row["category"] for row in csv.DictReader(fh)}
