"""Static feature-selection baselines.

A baseline ranks features once (permutation importance, lasso, or an
L1-penalized squared-hinge classifier), picks a fixed subset under the cost
budget, and trains a predictor that sees only that subset at every tick.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .cost import feature_costs, static_mask
from .data import CLASSIFICATION, DatasetSplits, FeatureSpec
from .env import column_targets
from .errors import DataError
from .evaluation import task_loss
from .predictor import PredictorConfig, StatePredictor, fit_predictor
from .trainer import full_states, masked_states, pooled_cost, predict_columns, score_states

log = logging.getLogger(__name__)

METHODS = ("permutation", "lasso", "l1_svm")


@dataclass
class ImportanceVector:
    scores: np.ndarray
    method: str


@dataclass
class SubsetSelection:
    selected: np.ndarray
    expected_cost: float

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.selected)


# ------------------------------------------------------ permutation importance


def _labeled_rows(states, episodes, reveal):
    """Stack labeled state columns (excluding the constant first column) and their labels."""
    X, y = [], []
    for s, e in zip(states, episodes):
        t = column_targets(e.y, reveal)
        keep = ~np.isnan(t)
        keep[0] = False
        X.append(s[keep])
        y.append(t[keep])
    return np.concatenate(X), np.concatenate(y)


def permutation_importance(predictor: StatePredictor, episodes, task: str, n_repeats: int = 5, seed: int = 0,
                           reveal_current_tick: bool = False) -> ImportanceVector:
    """Mean loss increase when one feature's values are shuffled across all ticks and subjects."""
    states = [full_states(e) for e in episodes]
    base = score_states(predictor, states, episodes, task, reveal_current_tick)
    rng = np.random.default_rng(seed)
    lengths = [s.shape[0] for s in states]
    stacked = np.concatenate(states)
    splits_at = np.cumsum(lengths)[:-1]
    nf = stacked.shape[1]
    scores = np.zeros(nf)
    for k in range(nf):
        deltas = []
        for _ in range(n_repeats):
            shuffled = stacked.copy()
            shuffled[:, k] = rng.permutation(shuffled[:, k])
            perm_states = np.split(shuffled, splits_at)
            deltas.append(score_states(predictor, perm_states, episodes, task, reveal_current_tick) - base)
        scores[k] = max(0.0, float(np.mean(deltas)))
    return ImportanceVector(scores, "permutation")


# ----------------------------------------------------------------------- lasso


@dataclass
class LassoResult:
    coef: np.ndarray
    intercept: float
    alpha: float
    alphas: np.ndarray
    cv_mse: np.ndarray
    n_iter: int
    dual_gap: float


def _standardize(X):
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0] = 1.0
    return (X - mean) / std, mean, std


def lasso_objective(X, y, coef, alpha) -> float:
    """(1 / 2n) ||y - X coef||^2 + alpha ||coef||_1 for centered X, y."""
    r = y - X @ coef
    return 0.5 * float(r @ r) / len(y) + alpha * float(np.abs(coef).sum())


def _duality_gap(X, y, coef, alpha) -> float:
    n = len(y)
    r = y - X @ coef
    dual_norm = np.max(np.abs(X.T @ r)) / n
    scale = min(1.0, alpha / dual_norm) if dual_norm > 0 else 1.0
    primal = 0.5 * (r @ r) / n + alpha * np.abs(coef).sum()
    nu = r * scale / n
    dual = -0.5 * n * (nu @ nu) + nu @ y
    return float(primal - dual)


def lasso_cd(X, y, alpha, coef0=None, max_iter: int = 20_000, tol: float = 1e-4, gram=None, xty=None):
    """Cyclic coordinate descent with soft-thresholding on centered data.

    Returns (coef, n_iter, duality gap). Stops when the largest coordinate
    update is below ``tol`` times the largest coefficient and the duality gap
    is below ``tol`` times ||y||^2 / n.
    """
    n, p = X.shape
    G = X.T @ X / n if gram is None else gram
    c = X.T @ y / n if xty is None else xty
    w = np.zeros(p) if coef0 is None else coef0.copy()
    diag = np.diag(G).copy()
    q = G @ w
    gap_tol = tol * float(y @ y) / n
    gap = np.inf
    for it in range(1, max_iter + 1):
        w_max = d_max = 0.0
        for j in range(p):
            if diag[j] == 0.0:
                continue
            old = w[j]
            rho = c[j] - q[j] + diag[j] * old
            new = np.sign(rho) * max(abs(rho) - alpha, 0.0) / diag[j]
            if new != old:
                q += G[:, j] * (new - old)
                w[j] = new
            d_max = max(d_max, abs(new - old))
            w_max = max(w_max, abs(new))
        if w_max == 0.0 or d_max / w_max < tol:
            gap = _duality_gap(X, y, w, alpha)
            if gap < gap_tol:
                return w, it, gap
    gap = _duality_gap(X, y, w, alpha)
    warnings.warn(f"lasso did not converge in {max_iter} sweeps (duality gap {gap:.3g}, target {gap_tol:.3g})",
                  stacklevel=2)
    return w, max_iter, gap


def alpha_grid(X, y, n_alphas: int = 100, eps: float = 1e-3) -> np.ndarray:
    """Geometric grid from alpha_max = max|X^T y| / n down to eps * alpha_max."""
    alpha_max = float(np.max(np.abs(X.T @ y)) / len(y))
    if alpha_max == 0.0:
        return np.full(n_alphas, np.finfo(float).eps)
    return np.geomspace(alpha_max, alpha_max * eps, n_alphas)


def lasso_path(X, y, alphas, max_iter: int = 20_000, tol: float = 1e-4):
    """Coefficients along ``alphas`` (descending) with warm starts; X and y must be centered."""
    G = X.T @ X / len(y)
    c = X.T @ y / len(y)
    coefs = np.zeros((len(alphas), X.shape[1]))
    w = None
    for i, a in enumerate(alphas):
        w, _, _ = lasso_cd(X, y, a, w, max_iter, tol, G, c)
        coefs[i] = w
    return coefs


def lasso_cv(X, y, n_alphas: int = 100, eps: float = 1e-3, n_folds: int = 5, max_iter: int = 20_000,
             tol: float = 1e-4, seed: int = 0) -> LassoResult:
    """Pick alpha by k-fold cross-validated MSE, then refit on all rows."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    Xs, _, _ = _standardize(X)
    Xc = Xs - Xs.mean(axis=0)
    yc = y - y.mean()
    alphas = alpha_grid(Xc, yc, n_alphas, eps)
    folds = np.array_split(np.random.default_rng(seed).permutation(len(y)), n_folds)
    mse = np.zeros((n_folds, len(alphas)))
    for f, test in enumerate(folds):
        train = np.setdiff1d(np.arange(len(y)), test)
        mx, my = Xs[train].mean(axis=0), y[train].mean()
        coefs = lasso_path(Xs[train] - mx, y[train] - my, alphas, max_iter, tol)
        pred = (Xs[test] - mx) @ coefs.T + my
        mse[f] = np.mean((pred - y[test, None]) ** 2, axis=0)
    mean_mse = mse.mean(axis=0)
    best = int(np.argmin(mean_mse))
    G, c = Xc.T @ Xc / len(y), Xc.T @ yc / len(y)
    w0 = lasso_path(Xc, yc, alphas[: best + 1], max_iter, tol)[-1] if best > 0 else None
    coef, n_iter, gap = lasso_cd(Xc, yc, alphas[best], w0, max_iter, tol, G, c)
    return LassoResult(coef, float(y.mean()), float(alphas[best]), alphas, mean_mse, n_iter, gap)


def lasso_importance(X, y, n_alphas: int = 100, eps: float = 1e-3, max_iter: int = 20_000, tol: float = 1e-4,
                     seed: int = 0) -> tuple[ImportanceVector, LassoResult]:
    res = lasso_cv(X, y, n_alphas, eps, 5, max_iter, tol, seed)
    return ImportanceVector(np.abs(res.coef), "lasso"), res


# ----------------------------------------------------- L1 squared-hinge model


@dataclass
class L1SvmResult:
    coef: np.ndarray
    intercept: float
    n_iter: int
    converged: bool


def l1_squared_hinge(X, y, C: float = 1.0, tol: float = 1e-4, max_iter: int = 1000,
                     class_weight: tuple[float, float] | str | None = "balanced") -> L1SvmResult:
    """min ||w||_1 + C * sum_i cw_i * max(0, 1 - y_i (x_i w + b))^2 by accelerated proximal gradient."""
    X = np.asarray(X, dtype=float)
    yb = np.where(np.asarray(y) > 0, 1.0, -1.0)
    n, p = X.shape
    if class_weight == "balanced":
        n_pos = max(int((yb > 0).sum()), 1)
        n_neg = max(n - n_pos, 1)
        cw = np.where(yb > 0, n / (2.0 * n_pos), n / (2.0 * n_neg))
    elif class_weight is None:
        cw = np.ones(n)
    else:
        cw = np.where(yb > 0, class_weight[1], class_weight[0])
    Xa = np.hstack([X, np.ones((n, 1))])
    # Lipschitz constant of the smooth part's gradient
    L = 2.0 * C * float(np.linalg.eigvalsh(Xa.T @ (Xa * cw[:, None]))[-1])
    if L == 0.0:
        return L1SvmResult(np.zeros(p), 0.0, 0, True)
    step = 1.0 / L

    def grad(theta):
        margin = 1.0 - yb * (Xa @ theta)
        act = np.maximum(margin, 0.0)
        return -2.0 * C * Xa.T @ (cw * act * yb)

    def prox(theta):
        out = theta.copy()
        out[:p] = np.sign(out[:p]) * np.maximum(np.abs(out[:p]) - step, 0.0)
        return out

    theta = np.zeros(p + 1)
    z = theta.copy()
    t = 1.0
    for it in range(1, max_iter + 1):
        new = prox(z - step * grad(z))
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        z = new + ((t - 1.0) / t_new) * (new - theta)
        change = np.max(np.abs(new - theta))
        theta, t = new, t_new
        if change <= tol * max(1.0, np.max(np.abs(theta))):
            return L1SvmResult(theta[:p], float(theta[p]), it, True)
    warnings.warn(f"L1 squared-hinge fit did not converge in {max_iter} iterations", stacklevel=2)
    return L1SvmResult(theta[:p], float(theta[p]), max_iter, False)


def l1_logistic_importance(X, y, C: float = 1.0, tol: float = 1e-4, max_iter: int = 1000,
                           class_weight="balanced") -> tuple[ImportanceVector, L1SvmResult]:
    res = l1_squared_hinge(X, y, C, tol, max_iter, class_weight)
    return ImportanceVector(np.abs(res.coef), "l1_svm"), res


# ------------------------------------------------------------------ selection


def expected_tick_costs(specs: Sequence[FeatureSpec], mean_ticks: float, cost_mode: str = "simple") -> np.ndarray:
    """Per-tick cost of fetching each feature at every tick; static features amortized over mean_ticks."""
    prices = feature_costs(specs, cost_mode)
    return np.where(static_mask(specs), prices / mean_ticks, prices)


def select_topk(importance, specs: Sequence[FeatureSpec], c_max: float, mean_ticks: float,
                cost_mode: str = "simple") -> SubsetSelection:
    """Admit features by descending importance (ties to the lower index) while the budget holds."""
    imp = np.asarray(importance.scores if isinstance(importance, ImportanceVector) else importance, dtype=float)
    if not np.all(np.isfinite(imp)):
        raise DataError("importance scores must be finite")
    costs = expected_tick_costs(specs, mean_ticks, cost_mode)
    order = np.lexsort((np.arange(imp.size), -imp))
    selected = np.zeros(imp.size, dtype=bool)
    total = 0.0
    for k in order:
        if total + costs[k] <= c_max + 1e-12:
            selected[k] = True
            total += costs[k]
    if not selected.any():
        log.warning("c_max=%s is below the cheapest feature (%.4g); empty subset", c_max, costs.min())
    return SubsetSelection(selected, float(total))


def select_knapsack(importance, costs, budget: float, resolution: float | None = None) -> SubsetSelection:
    """Exact 0/1 knapsack on costs rounded up to multiples of ``resolution`` (default budget / 1000).

    Among optimal subsets the one with fewer features wins, then the
    lexicographically smallest index set.
    """
    v = np.asarray(importance.scores if isinstance(importance, ImportanceVector) else importance, dtype=float)
    c = np.asarray(costs, dtype=float)
    n = v.size
    if budget <= 0 or not np.any(c <= budget):
        log.warning("every feature costs more than the budget %s; empty subset", budget)
        return SubsetSelection(np.zeros(n, dtype=bool), 0.0)
    q = budget / 1000.0 if resolution is None else resolution
    w = np.ceil(c / q - 1e-9).astype(int)
    cap = int(np.floor(budget / q + 1e-9))
    # suffix tables: best value / count using items i.. with capacity k
    val = np.zeros((n + 1, cap + 1))
    cnt = np.zeros((n + 1, cap + 1), dtype=int)
    tol = 1e-12 * max(1.0, float(np.abs(v).sum()))
    for i in range(n - 1, -1, -1):
        val[i], cnt[i] = val[i + 1], cnt[i + 1]
        if w[i] > cap or v[i] <= 0:
            continue
        take_v = val[i + 1, : cap + 1 - w[i]] + v[i]
        take_c = cnt[i + 1, : cap + 1 - w[i]] + 1
        skip_v = val[i + 1, w[i]:]
        skip_c = cnt[i + 1, w[i]:]
        better = (take_v > skip_v + tol) | ((np.abs(take_v - skip_v) <= tol) & (take_c <= skip_c))
        val[i, w[i]:] = np.where(better, take_v, skip_v)
        cnt[i, w[i]:] = np.where(better, take_c, skip_c)
    selected = np.zeros(n, dtype=bool)
    k = cap
    for i in range(n):
        if v[i] > 0 and w[i] <= k:
            tv, tc = val[i + 1, k - w[i]] + v[i], cnt[i + 1, k - w[i]] + 1
            if abs(tv - val[i, k]) <= tol and tc == cnt[i, k]:
                selected[i] = True
                k -= w[i]
    return SubsetSelection(selected, float(c[selected].sum()))


def sequence_costs(specs: Sequence[FeatureSpec], mean_ticks: float, cost_mode: str = "simple") -> np.ndarray:
    """Expected per-sequence cost of fetching each feature at every tick."""
    prices = feature_costs(specs, cost_mode)
    return np.where(static_mask(specs), prices, prices * mean_ticks)


# ------------------------------------------------------------------- training


@dataclass
class BaselineResult:
    method: str
    importance: ImportanceVector | None
    subset: SubsetSelection
    predictor: StatePredictor
    test_loss: float
    test_cost: float
    val_loss: float


def train_baseline(subset, splits: DatasetSplits, predictor_config: PredictorConfig | None = None,
                   cost_mode: str = "simple", reveal_current_tick: bool = False, seed: int = 0,
                   method: str = "subset", importance: ImportanceVector | None = None) -> BaselineResult:
    """Fetch ``subset`` at every tick (others stay at the fill value), fit and evaluate."""
    sel = np.asarray(subset.selected if isinstance(subset, SubsetSelection) else subset, dtype=bool)
    if sel.size != splits.n_features:
        raise DataError(f"subset has {sel.size} entries for {splits.n_features} features")
    states = {name: [masked_states(e, sel) for e in getattr(splits, name)] for name in ("train", "val", "test")}
    ys = {name: [column_targets(e.y, reveal_current_tick) for e in getattr(splits, name)]
          for name in ("train", "val")}
    pred = fit_predictor(states["train"], ys["train"], splits.task, predictor_config,
                         val=(states["val"], ys["val"]), seed=seed)
    test_loss = score_states(pred, states["test"], splits.test, splits.task, reveal_current_tick)
    val_loss = score_states(pred, states["val"], splits.val, splits.task, reveal_current_tick)
    actions = [np.repeat(sel[:, None], e.n_ticks, axis=1) for e in splits.test]
    test_cost = pooled_cost(actions, splits.specs, cost_mode)
    if not isinstance(subset, SubsetSelection):
        subset = SubsetSelection(sel, test_cost)
    return BaselineResult(method, importance, subset, pred, test_loss, test_cost, val_loss)


def design_matrix(splits: DatasetSplits, reveal_current_tick: bool = False, which: str = "train"):
    """Labeled rows of the fully observed states, without the constant first column."""
    eps = getattr(splits, which)
    return _labeled_rows([full_states(e) for e in eps], eps, reveal_current_tick)


def compute_importance(method: str, splits: DatasetSplits, predictor: StatePredictor | None = None,
                       reveal_current_tick: bool = False, seed: int = 0, n_repeats: int = 5) -> ImportanceVector:
    if method == "permutation":
        if predictor is None:
            raise DataError("permutation importance needs a trained predictor")
        return permutation_importance(predictor, splits.val, splits.task, n_repeats, seed, reveal_current_tick)
    X, y = design_matrix(splits, reveal_current_tick)
    if method == "lasso":
        if splits.task == CLASSIFICATION:
            raise DataError("lasso importance is for regression; use l1_svm")
        return lasso_importance(X, y, seed=seed)[0]
    if method == "l1_svm":
        if splits.task != CLASSIFICATION:
            raise DataError("l1_svm importance is for classification; use lasso")
        Xs, _, _ = _standardize(X)
        return l1_logistic_importance(Xs, y)[0]
    raise DataError(f"unknown importance method {method!r}; choose from {METHODS}")


def write_selection_csv(path, specs: Sequence[FeatureSpec], importance: ImportanceVector, subset: SubsetSelection,
                        costs: np.ndarray) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "score", "selected", "cost"])
        for k, spec in enumerate(specs):
            w.writerow([spec.name, repr(float(importance.scores[k])), int(subset.selected[k]), repr(float(costs[k]))])


def baseline_loss_of_constant(splits: DatasetSplits, reveal_current_tick: bool = False) -> float:
    """Loss of the train-median (regression) or constant-score (classification) predictor on test."""
    _, y_tr = design_matrix(splits, reveal_current_tick)
    _, y_te = design_matrix(splits, reveal_current_tick, "test")
    if splits.task == CLASSIFICATION:
        return task_loss(np.zeros(y_te.size), y_te, splits.task)
    return task_loss(np.full(y_te.size, np.median(y_tr)), y_te, splits.task)


__all__ = [
    "BaselineResult", "ImportanceVector", "LassoResult", "L1SvmResult", "SubsetSelection", "alpha_grid",
    "compute_importance", "expected_tick_costs", "l1_logistic_importance", "l1_squared_hinge", "lasso_cd",
    "lasso_cv", "lasso_importance", "lasso_path", "permutation_importance", "select_knapsack", "select_topk",
    "sequence_costs", "train_baseline", "write_selection_csv",
]
