"""Dataset generation, CSV ingestion, tick resampling, normalization and splitting.

Feature matrices are stored feature-major, ``x.shape == (n_features, n_ticks)``,
matching the acquisition-mask layout used by the environment.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, ImputationError, ParseError, SchemaError

STATIC = "static"
DYNAMIC = "dynamic"
REGRESSION = "regression"
CLASSIFICATION = "classification"

EVENT_COLUMNS = ("subject_id", "feature_name", "time_hours", "value")
LABEL_COLUMNS = ("subject_id", "time_hours", "value")


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str = DYNAMIC
    unit_cost: float = 1.0
    obs_cost: float = 1.0
    per_tick_cost: float | None = None

    def __post_init__(self):
        if self.kind not in (STATIC, DYNAMIC):
            raise SchemaError(f"feature {self.name!r}: kind must be 'static' or 'dynamic', got {self.kind!r}")
        if self.per_tick_cost is None:
            object.__setattr__(self, "per_tick_cost", float(self.obs_cost))
        for attr in ("unit_cost", "obs_cost", "per_tick_cost"):
            v = getattr(self, attr)
            if not (math.isfinite(v) and v >= 0):
                raise SchemaError(f"feature {self.name!r}: {attr} must be finite and >= 0, got {v}")
        if self.kind == STATIC and self.per_tick_cost != self.obs_cost:
            raise SchemaError(f"static feature {self.name!r} must have per_tick_cost == obs_cost")
        if self.per_tick_cost > self.obs_cost + 1e-12:
            raise SchemaError(f"feature {self.name!r}: per_tick_cost exceeds obs_cost")

    @property
    def is_static(self) -> bool:
        return self.kind == STATIC


@dataclass(frozen=True, eq=False)
class EpisodeData:
    """One subject: features ``x`` (N_F, N_T) and per-tick labels ``y`` (N_T,)."""

    x: np.ndarray
    y: np.ndarray
    subject_id: str

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[1] != y.shape[0]:
            raise DataError(f"subject {self.subject_id}: x {x.shape} and y {y.shape} are not aligned")
        if x.shape[1] < 2:
            raise DataError(f"subject {self.subject_id}: need at least 2 ticks, got {x.shape[1]}")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n_features(self) -> int:
        return self.x.shape[0]

    @property
    def n_ticks(self) -> int:
        return self.x.shape[1]


@dataclass
class Dataset:
    """A list of episodes sharing one feature schema."""

    episodes: list[EpisodeData]
    specs: list[FeatureSpec]
    task: str = REGRESSION
    relevance: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.episodes)

    def __iter__(self):
        return iter(self.episodes)

    @property
    def feature_names(self) -> list[str]:
        return [s.name for s in self.specs]


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    kept: np.ndarray  # indices into the pre-normalization feature list
    dropped: list[str] = field(default_factory=list)


@dataclass
class DatasetSplits:
    train: list[EpisodeData]
    val: list[EpisodeData]
    test: list[EpisodeData]
    specs: list[FeatureSpec]
    task: str = REGRESSION
    norm_stats: NormStats | None = None
    relevance: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return len(self.specs)

    def mean_train_ticks(self) -> float:
        return float(np.mean([e.n_ticks for e in self.train]))


@dataclass(frozen=True)
class SyntheticConfig:
    n_subjects: int = 1000
    n_features: int = 16
    n_informative: int = 4
    n_static: int = 2
    tick_range: tuple[int, int] = (16, 24)
    ar_coeff: float = 0.9
    noise_std: float = 0.45
    label_noise_std: float = 0.3
    task: str = REGRESSION
    seed: int = 0
    # Informative set switches to a disjoint set at the midpoint of each sequence.
    relevance_switch: bool = False

    def validate(self):
        if self.n_informative <= 0:
            raise ConfigError("n_informative must be >= 1 (no learnable signal otherwise)")
        if self.n_informative > self.n_features:
            raise ConfigError("n_informative cannot exceed n_features")
        if not 0 <= self.n_static < self.n_features:
            raise ConfigError("n_static must be in [0, n_features)")
        n_dynamic = self.n_features - self.n_static
        needed = self.n_informative * (2 if self.relevance_switch else 1)
        if needed > n_dynamic:
            raise ConfigError(f"need {needed} informative dynamic features but only {n_dynamic} are dynamic")
        lo, hi = self.tick_range
        if not 2 <= lo <= hi:
            raise ConfigError(f"tick_range must satisfy 2 <= min <= max, got {self.tick_range}")
        if not 0 < self.ar_coeff < 1:
            raise ConfigError("ar_coeff must lie in (0, 1)")
        if self.noise_std < 0 or self.label_noise_std < 0:
            raise ConfigError("noise levels must be non-negative")
        if self.task not in (REGRESSION, CLASSIFICATION):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.n_subjects < 1:
            raise ConfigError("n_subjects must be positive")


def generate_synthetic(config: SyntheticConfig) -> Dataset:
    """AR(1) feature trajectories with a sparse linear label on a planted subset.

    Dynamic features follow ``x[t] = ar * x[t-1] + eps`` started from N(0, 1);
    static features draw one N(0, 1) value per subject. The label is
    ``sum_k w_k x[k, t] + eta`` over the informative (dynamic) features; for
    classification it is the sign of that score relative to its median.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    nf, ns = config.n_features, config.n_static
    static_idx = np.arange(nf - ns, nf)
    dynamic_idx = np.arange(nf - ns)

    picked = rng.permutation(dynamic_idx)
    first = np.sort(picked[: config.n_informative])
    second = np.sort(picked[config.n_informative: 2 * config.n_informative]) if config.relevance_switch else first
    w_first = rng.choice([-1.0, 1.0], size=first.size) * rng.uniform(0.5, 1.5, size=first.size)
    if config.relevance_switch:
        w_second = rng.choice([-1.0, 1.0], size=second.size) * rng.uniform(0.5, 1.5, size=second.size)
    else:
        w_second = w_first

    lo, hi = config.tick_range
    xs, scores = [], []
    for _ in range(config.n_subjects):
        n_t = int(rng.integers(lo, hi + 1))
        x = np.empty((nf, n_t))
        x[:, 0] = rng.standard_normal(nf)
        eps = rng.standard_normal((nf, n_t)) * config.noise_std
        for t in range(1, n_t):
            x[:, t] = config.ar_coeff * x[:, t - 1] + eps[:, t]
        x[static_idx, :] = x[static_idx, :1]
        half = n_t // 2
        score = np.empty(n_t)
        score[:half] = w_first @ x[first, :half]
        score[half:] = w_second @ x[second, half:]
        score += rng.standard_normal(n_t) * config.label_noise_std
        xs.append(x)
        scores.append(score)

    if config.task == CLASSIFICATION:
        threshold = float(np.median(np.concatenate(scores)))
        labels = [np.where(s > threshold, 1.0, -1.0) for s in scores]
    else:
        labels = scores

    width = len(str(config.n_subjects))
    episodes = [EpisodeData(x, y, f"s{i:0{width}d}") for i, (x, y) in enumerate(zip(xs, labels))]
    specs = [FeatureSpec(f"f{k:02d}", STATIC if k in set(static_idx.tolist()) else DYNAMIC) for k in range(nf)]
    relevance = np.zeros(nf, dtype=bool)
    relevance[first] = True
    relevance[second] = True
    meta = {
        "informative_first": first.tolist(),
        "informative_second": second.tolist(),
        "weights_first": w_first.tolist(),
        "weights_second": w_second.tolist(),
    }
    return Dataset(episodes, specs, config.task, relevance, meta)


# --------------------------------------------------------------------------- CSV


@dataclass
class SubjectStreams:
    """Raw, unaligned observations of one subject."""

    subject_id: str
    streams: dict[str, tuple[np.ndarray, np.ndarray]]
    labels: tuple[np.ndarray, np.ndarray] | None = None


def _open_input(path):
    try:
        return open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None


def load_schema(path: str | Path) -> list[FeatureSpec]:
    """Read a schema CSV with columns ``name, kind, obs_cost`` (extra columns ignored)."""
    specs = []
    with _open_input(path) as fh:
        reader = csv.DictReader(fh)
        _require_columns(reader.fieldnames, ("name", "kind", "obs_cost"), path)
        for row in reader:
            try:
                obs_cost = float(row["obs_cost"])
            except ValueError as exc:
                raise ParseError(f"{path}: bad obs_cost for {row['name']!r}") from exc
            per_tick = row.get("per_tick_cost")
            specs.append(
                FeatureSpec(
                    row["name"],
                    row["kind"].strip().lower(),
                    obs_cost=obs_cost,
                    per_tick_cost=float(per_tick) if per_tick not in (None, "") else None,
                )
            )
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise SchemaError(f"{path}: duplicate feature names in schema")
    return specs


def write_schema(specs: Sequence[FeatureSpec], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "kind", "obs_cost", "per_tick_cost"])
        for s in specs:
            w.writerow([s.name, s.kind, repr(s.obs_cost), repr(s.per_tick_cost)])


def _require_columns(fieldnames, required, path):
    present = set(fieldnames or ())
    for col in required:
        if col not in present:
            raise ParseError(f"{path}: missing column {col!r}")


def _read_rows(path, required):
    with _open_input(path) as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        _require_columns(reader.fieldnames, required, path)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                t = float(row["time_hours"])
                v = float(row["value"])
            except (TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: unparsable time_hours/value") from exc
            rows.append((row, t, v))
        return rows


def ingest_csv(
    events_path: str | Path,
    schema_path: str | Path,
    labels_path: str | Path | None = None,
) -> list[SubjectStreams]:
    """Group event rows by subject and feature; labels come from an optional sidecar CSV."""
    specs = load_schema(schema_path)
    known = {s.name for s in specs}
    grouped: dict[str, dict[str, list[tuple[float, float]]]] = {}
    for row, t, v in _read_rows(events_path, EVENT_COLUMNS):
        name = row["feature_name"]
        if name not in known:
            raise SchemaError(f"feature {name!r} in events is not declared in the schema")
        grouped.setdefault(row["subject_id"], {}).setdefault(name, []).append((t, v))

    labels: dict[str, list[tuple[float, float]]] = {}
    if labels_path is not None:
        for row, t, v in _read_rows(labels_path, LABEL_COLUMNS):
            labels.setdefault(row["subject_id"], []).append((t, v))

    def as_arrays(points):
        points = sorted(points)
        return np.array([p[0] for p in points]), np.array([p[1] for p in points])

    out = []
    for sid in sorted(grouped, key=_natural_key):
        streams = {name: as_arrays(pts) for name, pts in grouped[sid].items()}
        out.append(SubjectStreams(sid, streams, as_arrays(labels[sid]) if sid in labels else None))
    return out


def _natural_key(s: str):
    return (len(s), s)


def interpolate_to_ticks(
    raw: SubjectStreams,
    tick_hours: float,
    feature_names: Sequence[str] | None = None,
    task: str = REGRESSION,
) -> EpisodeData:
    """Resample every stream onto a uniform grid starting at the subject's first event.

    Values are linearly interpolated between observations and held constant
    outside the observed span. The grid has ``floor(span / tick_hours) + 1``
    points so both endpoints of the span are represented.
    """
    if not tick_hours > 0:
        raise ConfigError("tick_hours must be positive")
    names = list(feature_names) if feature_names is not None else sorted(raw.streams)
    for name in names:
        times, _ = raw.streams.get(name, (np.empty(0), np.empty(0)))
        if times.size == 0:
            raise ImputationError(f"subject {raw.subject_id}: no observations for feature {name!r}")
    all_times = [raw.streams[n][0] for n in names]
    if raw.labels is not None:
        all_times.append(raw.labels[0])
    t0 = min(float(t.min()) for t in all_times)
    t1 = max(float(t.max()) for t in all_times)
    n_ticks = int(math.floor((t1 - t0) / tick_hours + 1e-9)) + 1
    grid = t0 + tick_hours * np.arange(n_ticks)

    x = np.vstack([np.interp(grid, *raw.streams[n]) for n in names])
    if raw.labels is None or raw.labels[0].size == 0:
        raise ImputationError(f"subject {raw.subject_id}: no label observations")
    lt, lv = raw.labels
    if task == CLASSIFICATION:
        # Labels are categorical: carry the most recent observation forward.
        idx = np.clip(np.searchsorted(lt, grid + 1e-9, side="right") - 1, 0, lt.size - 1)
        y = np.where(lv[idx] > 0, 1.0, -1.0)
    else:
        y = np.interp(grid, lt, lv)
    return EpisodeData(x, y, raw.subject_id)


def write_events_csv(dataset: Dataset, events_path, labels_path, tick_hours: float = 0.5) -> None:
    """Export a ticked dataset as grid-aligned event and label CSVs."""
    names = dataset.feature_names
    with open(events_path, "w", newline="", encoding="utf-8") as fe, \
            open(labels_path, "w", newline="", encoding="utf-8") as fl:
        we, wl = csv.writer(fe), csv.writer(fl)
        we.writerow(EVENT_COLUMNS)
        wl.writerow(LABEL_COLUMNS)
        for ep in dataset.episodes:
            times = tick_hours * np.arange(ep.n_ticks)
            for k, name in enumerate(names):
                if dataset.specs[k].is_static:
                    we.writerow([ep.subject_id, name, repr(0.0), repr(float(ep.x[k, 0]))])
                    continue
                for t, v in zip(times, ep.x[k]):
                    we.writerow([ep.subject_id, name, repr(float(t)), repr(float(v))])
            for t, v in zip(times, ep.y):
                wl.writerow([ep.subject_id, repr(float(t)), repr(float(v))])


# ------------------------------------------------------------- split / normalize


def split(
    data: Sequence[EpisodeData] | Dataset,
    fractions: tuple[float, float, float] = (0.68, 0.12, 0.20),
    seed: int = 0,
) -> DatasetSplits:
    """Random subject-level partition into train/val/test."""
    if isinstance(data, Dataset):
        episodes, specs, task, relevance, meta = data.episodes, data.specs, data.task, data.relevance, data.meta
    else:
        episodes = list(data)
        if not episodes:
            raise DataError("cannot split an empty dataset")
        specs = [FeatureSpec(f"f{k:02d}") for k in range(episodes[0].n_features)]
        task, relevance, meta = REGRESSION, None, {}
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ConfigError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    n = len(episodes)
    if n < 3:
        raise DataError(f"need at least 3 subjects to split, got {n}")
    ids = [e.subject_id for e in episodes]
    if len(set(ids)) != n:
        raise DataError("subject ids must be unique")

    n_train = max(1, int(round(fr[0] * n)))
    n_val = max(1, int(round(fr[1] * n)))
    n_train = min(n_train, n - n_val - 1)
    order = np.random.default_rng(seed).permutation(n)
    pick = lambda idx: [episodes[i] for i in idx]
    return DatasetSplits(
        train=pick(order[:n_train]),
        val=pick(order[n_train:n_train + n_val]),
        test=pick(order[n_train + n_val:]),
        specs=list(specs),
        task=task,
        relevance=relevance,
        meta=dict(meta),
    )


def normalize(splits: DatasetSplits, min_std: float = 1e-12) -> DatasetSplits:
    """Z-score every feature with train-split statistics; drop zero-variance features."""
    if not splits.train:
        raise DataError("train split is empty")
    pooled = np.concatenate([e.x for e in splits.train], axis=1)
    mean = pooled.mean(axis=1)
    std = pooled.std(axis=1)
    kept = np.flatnonzero(std > min_std)
    dropped = [splits.specs[k].name for k in np.flatnonzero(std <= min_std)]
    if dropped:
        warnings.warn(f"dropping zero-variance features: {', '.join(dropped)}", stacklevel=2)
    if kept.size == 0:
        raise DataError("every feature is constant on the training split")
    m, s = mean[kept, None], std[kept, None]

    def apply(eps):
        return [EpisodeData((e.x[kept] - m) / s, e.y, e.subject_id) for e in eps]

    relevance = splits.relevance[kept] if splits.relevance is not None else None
    return replace(
        splits,
        train=apply(splits.train),
        val=apply(splits.val),
        test=apply(splits.test),
        specs=[splits.specs[k] for k in kept],
        norm_stats=NormStats(mean[kept], std[kept], kept, dropped),
        relevance=relevance,
    )


def denormalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """Inverse of :func:`normalize` for a (n_kept_features, ...) array."""
    values = np.asarray(values, dtype=float)
    shape = (-1,) + (1,) * (values.ndim - 1)
    return values * stats.std.reshape(shape) + stats.mean.reshape(shape)


def prepare_splits(dataset: Dataset, seed: int, fractions=(0.68, 0.12, 0.20)) -> DatasetSplits:
    return normalize(split(dataset, fractions, seed))
