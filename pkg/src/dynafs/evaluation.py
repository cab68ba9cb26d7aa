"""Metrics, activation maps, cost-loss curves and a small SVG renderer."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .env import SAMPLE, rollout_batch
from .errors import DataError


def mae(preds, labels) -> float:
    p = np.asarray(preds, dtype=float).ravel()
    y = np.asarray(labels, dtype=float).ravel()
    if p.size == 0 or p.size != y.size:
        raise DataError(f"mae needs equal, nonempty inputs (got {p.size} and {y.size})")
    return float(np.mean(np.abs(p - y)))


def auroc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative, ties counted 1/2."""
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel() > 0
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("auroc needs both classes present")
    # midranks handle ties exactly
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size)
    sorted_s = s[order]
    bounds = np.flatnonzero(np.diff(sorted_s)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [s.size]])
    mid = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(mid, ends - starts)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def task_loss(preds, labels, task: str) -> float:
    """MAE for regression, 1 - AUROC for classification."""
    if task == "classification":
        return 1.0 - auroc(preds, labels)
    return mae(preds, labels)


# ------------------------------------------------------------- activation map


@dataclass
class ActivationMap:
    matrix: np.ndarray        # (N_F, T_max), rows in feature order
    order: np.ndarray         # feature indices by descending mean activation
    counts: np.ndarray        # episodes contributing to each tick
    feature_names: list

    def ordered(self) -> np.ndarray:
        return self.matrix[self.order]

    def mean_activation(self) -> np.ndarray:
        """Per-feature mean over ticks with at least one contributing episode."""
        live = self.counts > 0
        return self.matrix[:, live].mean(axis=1) if live.any() else np.zeros(self.matrix.shape[0])

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["feature"] + [f"t{t}" for t in range(self.matrix.shape[1])])
            for k in self.order:
                w.writerow([self.feature_names[k]] + [repr(float(v)) for v in self.matrix[k]])


def activation_map(policy, episodes, t_max: int = 40, mode: str = SAMPLE, seed: int = 0,
                   n_rollouts: int = 1, feature_names=None, batch_size: int = 512) -> ActivationMap:
    """Empirical acquisition frequency per feature and tick over the first ``t_max`` ticks."""
    if t_max < 1:
        raise DataError("t_max must be >= 1")
    nf = policy.n_features
    total = np.zeros((nf, t_max))
    counts = np.zeros(t_max)
    rng = np.random.default_rng(seed)
    reps = n_rollouts if mode == SAMPLE else 1
    for _ in range(reps):
        for start in range(0, len(episodes), batch_size):
            ro = rollout_batch(episodes[start:start + batch_size], policy, mode, rng)
            T = min(t_max, ro.actions.shape[1])
            valid = ro.valid[:, :T]
            total[:, :T] += np.einsum("btf,bt->ft", ro.actions[:, :T].astype(float), valid.astype(float))
            counts[:T] += valid.sum(axis=0)
    matrix = np.divide(total, counts, out=np.zeros_like(total), where=counts > 0)
    live = counts > 0
    means = matrix[:, live].mean(axis=1) if live.any() else np.zeros(nf)
    order = np.lexsort((np.arange(nf), -means))
    names = list(feature_names) if feature_names is not None else [f"f{k:02d}" for k in range(nf)]
    return ActivationMap(matrix, order, counts, names)


# --------------------------------------------------------------------- curves


@dataclass
class CurvePoint:
    method: str
    target_c_max: float
    achieved_cost: float
    loss: float
    seed: int = 0


def assemble_curve(points: Sequence[CurvePoint]) -> dict[str, list[CurvePoint]]:
    """Group by method tag and sort each group by achieved cost."""
    out: dict[str, list[CurvePoint]] = {}
    for p in points:
        if p.achieved_cost < 0 or p.loss < 0:
            raise DataError(f"invalid curve point {p}")
        out.setdefault(p.method, []).append(p)
    for m in out:
        out[m].sort(key=lambda p: (p.achieved_cost, p.loss, p.target_c_max))
    return dict(sorted(out.items()))


def write_curve(curves: dict[str, list[CurvePoint]], path) -> None:
    """CSV curve; a sibling ``.meta.json`` notes the log10 cost axis."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "target_c_max", "achieved_cost", "loss", "seed"])
        for pts in curves.values():
            for p in pts:
                w.writerow([p.method, repr(p.target_c_max), repr(p.achieved_cost), repr(p.loss), p.seed])
    meta = {"x": "achieved_cost", "x_scale": "log10", "y": "loss"}
    path.with_suffix(".meta.json").write_text(json.dumps(meta, sort_keys=True))


def read_curve(path) -> list[CurvePoint]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [CurvePoint(r["method"], float(r["target_c_max"]), float(r["achieved_cost"]), float(r["loss"]),
                           int(r["seed"])) for r in csv.DictReader(fh)]


# ------------------------------------------------------------------------ SVG

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def curve_svg(curves: dict[str, list[CurvePoint]], width: int = 480, height: int = 320) -> str:
    """Cost-loss curves on a log10 cost axis."""
    pts = [p for ps in curves.values() for p in ps if p.achieved_cost > 0]
    if not pts:
        return f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}"></svg>'
    lx = [math.log10(p.achieved_cost) for p in pts]
    ly = [p.loss for p in pts]
    x0, x1 = min(lx), max(lx) + 1e-9
    y0, y1 = min(ly), max(ly) + 1e-9
    pad = 40

    def sx(c):
        return pad + (math.log10(c) - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(v):
        return height - pad - (v - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">cost per tick (log10)</text>',
             f'<text x="12" y="{height / 2}" font-size="12" transform="rotate(-90 12 {height / 2})">loss</text>']
    for i, (method, ps) in enumerate(curves.items()):
        color = _COLORS[i % len(_COLORS)]
        ps = [p for p in ps if p.achieved_cost > 0]
        line = " ".join(f"{sx(p.achieved_cost):.1f},{sy(p.loss):.1f}" for p in ps)
        parts.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"/>')
        parts += [f'<circle cx="{sx(p.achieved_cost):.1f}" cy="{sy(p.loss):.1f}" r="3" fill="{color}"/>' for p in ps]
        parts.append(f'<text x="{width - pad}" y="{pad + 14 * i}" text-anchor="end" font-size="11" '
                     f'fill="{color}">{method}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def activation_svg(amap: ActivationMap, cell: int = 10) -> str:
    """Grayscale heat map, rows ordered by mean activation."""
    m = amap.ordered()
    nf, nt = m.shape
    label_w = 60
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{label_w + nt * cell}" height="{nf * cell + 4}">']
    for r, k in enumerate(amap.order):
        parts.append(f'<text x="0" y="{r * cell + cell - 1}" font-size="{cell - 1}">{amap.feature_names[k]}</text>')
        for t in range(nt):
            g = int(round(255 * (1.0 - m[r, t])))
            parts.append(f'<rect x="{label_w + t * cell}" y="{r * cell}" width="{cell}" height="{cell}" '
                         f'fill="rgb({g},{g},{g})"/>')
    parts.append("</svg>")
    return "\n".join(parts)


def curve_points_to_json(points: Sequence[CurvePoint]) -> list[dict]:
    return [asdict(p) for p in points]
