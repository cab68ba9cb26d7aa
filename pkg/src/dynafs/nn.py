"""Minimal numpy recurrent network with hand-written backpropagation through time.

Every recurrent model in the package (label predictor, actor, critic) is an
LSTM layer followed by a dense head, :class:`LstmHead`. Sequences are batched
as ``(batch, time, features)``; padding at the end of shorter sequences is
harmless because the recurrence is causal and losses mask padded ticks.
"""
from __future__ import annotations

import numpy as np

BETA1 = 0.9
BETA2 = 0.999


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class LstmHead:
    """LSTM(n_in -> n_hidden) followed by a dense projection to n_out.

    Gate order inside the fused weight matrices is input, forget, cell, output.
    """

    KEYS = ("Wx", "Wh", "b", "Wo", "bo")

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator | None = None,
                 out_scale: float = 1.0):
        self.n_in, self.n_hidden, self.n_out = n_in, n_hidden, n_out
        if rng is None:
            self.params = {}
            return
        h = n_hidden
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0  # forget-gate bias
        self.params = {
            "Wx": rng.standard_normal((n_in, 4 * h)) / np.sqrt(n_in + h),
            "Wh": _orthogonal(rng, h, 4 * h),
            "b": b,
            "Wo": rng.standard_normal((h, n_out)) * out_scale / np.sqrt(h),
            "bo": np.zeros(n_out),
        }

    # ------------------------------------------------------------------ forward

    def initial_state(self, batch: int):
        return np.zeros((batch, self.n_hidden)), np.zeros((batch, self.n_hidden))

    def step(self, x: np.ndarray, state):
        """One tick for a batch: returns (output (B, n_out), new state)."""
        p, hdim = self.params, self.n_hidden
        h, c = state
        z = x @ p["Wx"] + h @ p["Wh"] + p["b"]
        i = sigmoid(z[:, :hdim])
        f = sigmoid(z[:, hdim:2 * hdim])
        g = np.tanh(z[:, 2 * hdim:3 * hdim])
        o = sigmoid(z[:, 3 * hdim:])
        c = f * c + i * g
        h = o * np.tanh(c)
        return h @ p["Wo"] + p["bo"], (h, c)

    def forward(self, X: np.ndarray):
        """Full-sequence pass from a zero state; returns (outputs (B, T, n_out), cache)."""
        p, hdim = self.params, self.n_hidden
        B, T, _ = X.shape
        zx = X @ p["Wx"] + p["b"]
        Hs = np.empty((B, T + 1, hdim))
        Cs = np.empty((B, T + 1, hdim))
        Hs[:, 0] = 0.0
        Cs[:, 0] = 0.0
        acts = np.empty((B, T, 4 * hdim))
        for t in range(T):
            z = zx[:, t] + Hs[:, t] @ p["Wh"]
            a = acts[:, t]
            a[:, :2 * hdim] = sigmoid(z[:, :2 * hdim])
            a[:, 2 * hdim:3 * hdim] = np.tanh(z[:, 2 * hdim:3 * hdim])
            a[:, 3 * hdim:] = sigmoid(z[:, 3 * hdim:])
            Cs[:, t + 1] = a[:, hdim:2 * hdim] * Cs[:, t] + a[:, :hdim] * a[:, 2 * hdim:3 * hdim]
            Hs[:, t + 1] = a[:, 3 * hdim:] * np.tanh(Cs[:, t + 1])
        out = Hs[:, 1:] @ p["Wo"] + p["bo"]
        return out, (X, Hs, Cs, acts)

    # ----------------------------------------------------------------- backward

    def backward(self, d_out: np.ndarray, cache):
        """Gradients of a scalar loss given dLoss/dOutputs (B, T, n_out)."""
        p, hdim = self.params, self.n_hidden
        X, Hs, Cs, acts = cache
        B, T, _ = X.shape
        grads = {"Wo": Hs[:, 1:].reshape(-1, hdim).T @ d_out.reshape(-1, self.n_out),
                 "bo": d_out.sum(axis=(0, 1))}
        dH_ext = d_out @ p["Wo"].T
        dZ = np.empty((B, T, 4 * hdim))
        dh_next = np.zeros((B, hdim))
        dc_next = np.zeros((B, hdim))
        WhT = p["Wh"].T
        for t in range(T - 1, -1, -1):
            a = acts[:, t]
            i, f, g, o = a[:, :hdim], a[:, hdim:2 * hdim], a[:, 2 * hdim:3 * hdim], a[:, 3 * hdim:]
            tc = np.tanh(Cs[:, t + 1])
            dh = dH_ext[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = dZ[:, t]
            dz[:, :hdim] = dc * g * i * (1.0 - i)
            dz[:, hdim:2 * hdim] = dc * Cs[:, t] * f * (1.0 - f)
            dz[:, 2 * hdim:3 * hdim] = dc * i * (1.0 - g * g)
            dz[:, 3 * hdim:] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dz @ WhT
        flat_dz = dZ.reshape(-1, 4 * hdim)
        grads["Wx"] = X.reshape(-1, self.n_in).T @ flat_dz
        grads["Wh"] = Hs[:, :-1].reshape(-1, hdim).T @ flat_dz
        grads["b"] = flat_dz.sum(axis=0)
        dX = dZ @ p["Wx"].T
        return grads, dX

    # ------------------------------------------------------------ serialization

    def to_dict(self) -> dict:
        return {
            "n_in": self.n_in,
            "n_hidden": self.n_hidden,
            "n_out": self.n_out,
            "params": {k: v.tolist() for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LstmHead":
        net = cls(d["n_in"], d["n_hidden"], d["n_out"])
        net.params = {k: np.asarray(v, dtype=float) for k, v in d["params"].items()}
        return net

    def copy(self) -> "LstmHead":
        net = LstmHead(self.n_in, self.n_hidden, self.n_out)
        net.params = {k: v.copy() for k, v in self.params.items()}
        return net

    def check_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params.values())


def _orthogonal(rng, rows, cols):
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    return q if rows >= cols else q.T


# ------------------------------------------------------------------ optimizer


def adam_init(params: dict) -> dict:
    return {"t": 0, "m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()}}


def adam_step(params: dict, grads: dict, state: dict, lr: float, adam_eps: float = 1e-8,
              beta1: float = BETA1, beta2: float = BETA2) -> dict:
    """Bias-corrected Adam update, applied in place; returns ``params``."""
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, g in grads.items():
        m = state["m"][k]
        v = state["v"][k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + adam_eps)
    return params


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Rescale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm
