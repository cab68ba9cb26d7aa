"""Plain linear and logistic predictors on per-tick state vectors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from ..errors import DataError

REGRESSION = "regression"
BINARY = "binary"


@dataclass
class LinearModel:
    coef: np.ndarray
    intercept: float
    task: str

    @property
    def n_features(self) -> int:
        return self.coef.size

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if np.isnan(X).any():
            raise DataError("NaN in predictor input")
        z = X @ self.coef + self.intercept
        if self.task == BINARY:
            return 1.0 / (1.0 + np.exp(-z))
        return z

    def to_dict(self):
        return {"coef": self.coef.tolist(), "intercept": self.intercept, "task": self.task}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["coef"], dtype=float), float(d["intercept"]), d["task"])


def fit_linear(X, y, sample_weight=None, ridge: float = 1e-8) -> LinearModel:
    """Weighted least squares with an unpenalized intercept."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    mx = w @ X / w.sum()
    my = w @ y / w.sum()
    Xc = X - mx
    A = Xc.T @ (Xc * w[:, None]) + ridge * np.eye(X.shape[1])
    coef = np.linalg.solve(A, Xc.T @ (w * (y - my)))
    return LinearModel(coef, float(my - mx @ coef), REGRESSION)


def fit_logistic(X, y, sample_weight=None, l2: float = 1e-4) -> LinearModel:
    """Weighted logistic regression (labels in {-1, +1} or {0, 1}) by L-BFGS."""
    X = np.asarray(X, dtype=float)
    t = (np.asarray(y) > 0).astype(float)
    w = np.ones(len(t)) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    w = w / w.sum()
    nf = X.shape[1]

    def objective(theta):
        z = X @ theta[:nf] + theta[nf]
        # log(1 + e^z) - t z, computed stably
        loss = np.sum(w * (np.logaddexp(0.0, z) - t * z)) + 0.5 * l2 * theta[:nf] @ theta[:nf]
        r = w * (1.0 / (1.0 + np.exp(-z)) - t)
        grad = np.concatenate([X.T @ r + l2 * theta[:nf], [r.sum()]])
        return loss, grad

    res = minimize(objective, np.zeros(nf + 1), jac=True, method="L-BFGS-B")
    return LinearModel(res.x[:nf].copy(), float(res.x[nf]), BINARY)
