"""Histogram gradient-boosted regression trees.

Trees are grown level by level on pre-binned features. A node splits on the
candidate threshold with the largest weighted variance reduction of the
negative gradients; ties go to the lowest feature index, then the lowest
threshold. Samples with ``x <= threshold`` go left.

Each tree is stored in heap layout (children of node ``i`` are ``2i+1`` and
``2i+2``) padded to the full depth: a node that did not split has
``feature == -1`` and routes every sample to its left child, so prediction is
a fixed number of vectorized gathers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError

REGRESSION = "regression"
BINARY = "binary"
_TIE_RTOL = 1e-12
_PROB_CLIP = 1e-6


@dataclass
class GbdtConfig:
    n_trees: int = 100
    depth: int = 4
    lr: float = 0.1
    task: str = REGRESSION
    min_samples_leaf: int = 20
    max_bins: int = 64
    subsample: float = 1.0
    n_models: int = 1
    seed: int = 0


@dataclass
class Tree:
    depth: int
    feature: np.ndarray  # (2**depth - 1,) int, -1 where the node does not split
    threshold: np.ndarray  # (2**depth - 1,) float, 0 where the node does not split
    leaf: np.ndarray  # (2**depth,) float

    def apply(self, X: np.ndarray) -> np.ndarray:
        idx = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        for _ in range(self.depth):
            f = self.feature[idx]
            go_right = (f >= 0) & (X[rows, np.maximum(f, 0)] > self.threshold[idx])
            idx = 2 * idx + 1 + go_right
        return idx - (2 ** self.depth - 1)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.leaf[self.apply(X)]

    def to_dict(self) -> dict:
        return {"depth": self.depth, "feature": self.feature.tolist(),
                "threshold": self.threshold.tolist(), "leaf": self.leaf.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Tree":
        return cls(int(d["depth"]), np.asarray(d["feature"], dtype=np.int64),
                   np.asarray(d["threshold"], dtype=float), np.asarray(d["leaf"], dtype=float))


@dataclass
class GbdtModel:
    trees: list[Tree]
    learning_rate: float
    base_score: float
    task: str
    n_features: int
    train_loss: list[float] = field(default_factory=list)

    def __post_init__(self):
        self._stacked = None

    def _stack(self):
        if self._stacked is None and self.trees:
            depth = max(t.depth for t in self.trees)
            n_int, n_leaf = 2 ** depth - 1, 2 ** depth
            feat = np.full((len(self.trees), n_int), -1, dtype=np.int64)
            thr = np.zeros((len(self.trees), n_int))
            leaf = np.zeros((len(self.trees), n_leaf))
            for i, t in enumerate(self.trees):
                # Re-embed shallower trees: a leaf at depth d becomes the left-most leaf below it.
                feat[i], thr[i], leaf[i] = _embed(t, depth)
            self._stacked = (depth, feat, thr, leaf)
        return self._stacked

    def predict_margin(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DataError(f"expected (n, {self.n_features}) input, got {X.shape}")
        if np.isnan(X).any():
            raise DataError("NaN in predictor input")
        margin = np.full(X.shape[0], self.base_score)
        if not self.trees:
            return margin
        depth, feat, thr, leaf = self._stack()
        n_trees = feat.shape[0]
        rows = np.arange(X.shape[0])[None, :]
        tree_ids = np.arange(n_trees)[:, None]
        idx = np.zeros((n_trees, X.shape[0]), dtype=np.int64)
        for _ in range(depth):
            f = feat[tree_ids, idx]
            right = (f >= 0) & (X[rows, np.maximum(f, 0)] > thr[tree_ids, idx])
            idx = 2 * idx + 1 + right
        vals = leaf[tree_ids, idx - (2 ** depth - 1)]
        return margin + self.learning_rate * vals.sum(axis=0)

    def predict(self, X: np.ndarray) -> np.ndarray:
        m = self.predict_margin(X)
        if self.task == BINARY:
            return 1.0 / (1.0 + np.exp(-m))
        return m

    def to_dict(self) -> dict:
        return {"learning_rate": self.learning_rate, "base_score": self.base_score, "task": self.task,
                "n_features": self.n_features, "train_loss": list(self.train_loss),
                "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d) -> "GbdtModel":
        return cls([Tree.from_dict(t) for t in d["trees"]], float(d["learning_rate"]),
                   float(d["base_score"]), d["task"], int(d["n_features"]), list(d.get("train_loss", [])))


def _embed(tree: Tree, depth: int):
    n_int = 2 ** depth - 1
    feat = np.full(n_int, -1, dtype=np.int64)
    thr = np.zeros(n_int)
    leaf = np.zeros(2 ** depth)
    # Map heap indices of the shallow tree to the deeper layout level by level.
    for node in range(2 ** tree.depth - 1):
        feat[node], thr[node] = tree.feature[node], tree.threshold[node]
    shift = depth - tree.depth
    for j, v in enumerate(tree.leaf):
        node = 2 ** tree.depth - 1 + j
        for _ in range(shift):
            node = 2 * node + 1
        leaf[node - n_int] = v
    return feat, thr, leaf


def predict_gbdt(model, state_t: np.ndarray):
    """Prediction for one state vector (or a batch of row vectors)."""
    X = np.asarray(state_t, dtype=float)
    single = X.ndim == 1
    out = model.predict(X[None, :] if single else X)
    return float(out[0]) if single else out


# ------------------------------------------------------------------- fitting


def candidate_thresholds(values: np.ndarray, max_bins: int) -> np.ndarray:
    """Midpoints between consecutive distinct values (quantile-thinned to max_bins - 1)."""
    u = np.unique(values)
    if u.size <= 1:
        return np.empty(0)
    if u.size > max_bins:
        pos = np.unique(np.round(np.linspace(0, u.size - 1, max_bins + 1)[1:-1]).astype(int))
        pos = pos[pos < u.size - 1]
        return (u[pos] + u[pos + 1]) / 2.0
    return (u[:-1] + u[1:]) / 2.0


def _loss(task, y, pred_margin, w):
    if task == BINARY:
        p = np.clip(1.0 / (1.0 + np.exp(-pred_margin)), 1e-15, 1 - 1e-15)
        return float(-np.sum(w * (y * np.log(p) + (1 - y) * np.log(1 - p))) / w.sum())
    r = y - pred_margin
    return float(np.sum(w * r * r) / w.sum())


def fit_gbdt(X: np.ndarray, y: np.ndarray, config: GbdtConfig | None = None,
             sample_weight: np.ndarray | None = None) -> GbdtModel:
    """Stagewise boosting of depth-limited trees.

    Regression uses squared loss with mean-residual leaves; ``binary`` expects
    labels in {-1, +1} (or {0, 1}) and uses weighted logistic loss with
    Newton-step leaves.
    """
    config = config or GbdtConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, nf = X.shape if X.ndim == 2 else (0, 0)
    if n < 2 or y.shape != (n,):
        raise DataError(f"need >= 2 aligned samples, got X {X.shape}, y {y.shape}")
    if np.isnan(X).any() or np.isnan(y).any():
        raise DataError("NaN in training data")
    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    task = config.task
    if task == BINARY:
        y = (y > 0).astype(float)
        pos = np.sum(w * y) / w.sum()
        base = float(np.log(np.clip(pos, _PROB_CLIP, 1 - _PROB_CLIP) / np.clip(1 - pos, _PROB_CLIP, 1 - _PROB_CLIP)))
        degenerate = pos in (0.0, 1.0)
    else:
        base = float(np.sum(w * y) / w.sum())
        degenerate = np.ptp(y) == 0.0
    model = GbdtModel([], config.lr, base, task, nf)
    margin = np.full(n, base)
    model.train_loss.append(_loss(task, y, margin, w))
    if degenerate:
        return model
    thresholds = [candidate_thresholds(X[:, f], config.max_bins) for f in range(nf)]
    n_bins = max(t.size for t in thresholds) + 1
    if n_bins == 1:
        return model  # every feature constant: nothing to split on
    bins = np.empty((n, nf), dtype=np.int64)
    for f in range(nf):
        bins[:, f] = np.searchsorted(thresholds[f], X[:, f], side="left")
    flat_bins = bins + np.arange(nf) * n_bins
    rng = np.random.default_rng(config.seed)

    for _ in range(config.n_trees):
        if task == BINARY:
            p = 1.0 / (1.0 + np.exp(-margin))
            grad, hess = y - p, p * (1 - p)
        else:
            grad, hess = y - margin, np.ones(n)
        rows = np.arange(n)
        if config.subsample < 1.0:
            rows = np.sort(rng.choice(n, size=max(2, int(config.subsample * n)), replace=False))
        tree = _grow_tree(flat_bins[rows], thresholds, n_bins, grad[rows], hess[rows], w[rows], config)
        margin = margin + config.lr * tree.predict(X)
        model.trees.append(tree)
        model.train_loss.append(_loss(task, y, margin, w))
    return model


def _grow_tree(flat_bins, thresholds, n_bins, grad, hess, w, config) -> Tree:
    n, nf = flat_bins.shape
    depth = config.depth
    n_int = 2 ** depth - 1
    feature = np.full(n_int, -1, dtype=np.int64)
    threshold = np.zeros(n_int)
    split_bin = np.zeros(n_int, dtype=np.int64)
    node = np.zeros(n, dtype=np.int64)  # heap index of each sample's current node
    rows = np.arange(n)
    wg = w * grad
    width = nf * n_bins
    min_leaf = max(1, config.min_samples_leaf)
    uniform_w = bool(np.all(w == w[0]))
    can_split = np.zeros(n_int, dtype=bool)
    can_split[0] = True
    hist = None
    for level in range(depth):
        first = 2 ** level - 1
        n_level = 2 ** level
        if hist is None:
            hist = _histograms(np.ones(n, dtype=bool), np.zeros(n, dtype=np.int64), flat_bins,
                               wg, w, uniform_w, 1, width, nf, n_bins)
        else:
            # Histogram only left children; right sibling = parent - left.
            local = node - first
            is_left = local % 2 == 0
            left = _histograms(is_left, local // 2, flat_bins, wg, w, uniform_w, n_level // 2, width, nf, n_bins)
            hist = tuple(_interleave(lh, ph - lh) for lh, ph in zip(left, hist))
        G, C, W = hist
        GL = np.cumsum(G, axis=2)[..., :-1]
        WL = np.cumsum(W, axis=2)[..., :-1]
        CL = np.cumsum(C, axis=2)[..., :-1]
        Gt, Wt, Ct = G.sum(axis=2, keepdims=True), W.sum(axis=2, keepdims=True), C.sum(axis=2, keepdims=True)
        GR, WR, CR = Gt - GL, Wt - WL, Ct - CL
        # bins past a feature's last threshold leave the right side empty, so CR masks them
        valid = (CL >= min_leaf) & (CR >= min_leaf) & (WL > 0) & (WR > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = GL * GL / WL + GR * GR / WR - Gt * Gt / Wt
        gain = np.where(valid, gain, -np.inf).reshape(n_level, -1)
        best = gain.max(axis=1)
        for j in np.flatnonzero(can_split[first:first + n_level]):
            heap = first + j
            scale = max(1.0, abs(float(Gt[j, 0, 0] ** 2 / Wt[j, 0, 0]))) if Wt[j, 0, 0] > 0 else 1.0
            if not np.isfinite(best[j]) or best[j] <= 1e-12 * scale:
                continue
            tol = _TIE_RTOL * max(1.0, abs(best[j]))
            flat = int(np.argmax(gain[j] >= best[j] - tol))
            f, b = divmod(flat, n_bins - 1)
            feature[heap] = f
            threshold[heap] = thresholds[f][b]
            split_bin[heap] = b
            if level + 1 < depth:
                can_split[2 * heap + 1] = can_split[2 * heap + 2] = True
        f = feature[node]
        fc = np.maximum(f, 0)
        go_right = (f >= 0) & (flat_bins[rows, fc] - fc * n_bins > split_bin[node])
        node = 2 * node + 1 + go_right

    leaf_idx = node - n_int
    n_leaf = 2 ** depth
    sum_g = np.bincount(leaf_idx, weights=wg, minlength=n_leaf)
    if config.task == BINARY:
        denom = np.bincount(leaf_idx, weights=w * hess, minlength=n_leaf)
    else:
        denom = np.bincount(leaf_idx, weights=w, minlength=n_leaf)
    leaf = np.where(denom > 1e-12, sum_g / np.maximum(denom, 1e-12), 0.0)
    return Tree(depth, feature, threshold, leaf)


def _histograms(mask, parent, flat_bins, wg, w, uniform_w, n_nodes, width, nf, n_bins):
    sel = np.flatnonzero(mask)
    key = (parent[sel][:, None] * width + flat_bins[sel]).ravel()
    size = n_nodes * width
    shape = (n_nodes, nf, n_bins)
    G = np.bincount(key, weights=np.repeat(wg[sel], nf), minlength=size).reshape(shape)
    C = np.bincount(key, minlength=size).reshape(shape)
    W = C * w[0] if uniform_w else np.bincount(key, weights=np.repeat(w[sel], nf), minlength=size).reshape(shape)
    return G, C, W


def _interleave(a, b):
    out = np.empty((a.shape[0] * 2,) + a.shape[1:], dtype=np.result_type(a, b))
    out[0::2] = a
    out[1::2] = b
    return out


class GbdtEnsemble:
    """Average of several boosted models fitted with different seeds."""

    def __init__(self, models: list[GbdtModel]):
        self.models = models
        self.task = models[0].task
        self.n_features = models[0].n_features

    def predict(self, X):
        return np.mean([m.predict(X) for m in self.models], axis=0)

    def to_dict(self):
        return {"models": [m.to_dict() for m in self.models]}

    @classmethod
    def from_dict(cls, d):
        return cls([GbdtModel.from_dict(m) for m in d["models"]])


def fit_gbdt_ensemble(X, y, config: GbdtConfig, sample_weight=None):
    if config.n_models <= 1:
        return fit_gbdt(X, y, config, sample_weight)
    from dataclasses import replace
    return GbdtEnsemble([fit_gbdt(X, y, replace(config, seed=config.seed + i), sample_weight)
                         for i in range(config.n_models)])
