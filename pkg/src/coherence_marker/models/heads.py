"""Trainable heads with hand-written gradients, plus losses and optimizers."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Params = dict[str, np.ndarray]


def concat_features(u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    """``[u1, u2, u1 - u2, u1 * u2, |u1 - u2|]`` along the last axis."""
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    if u1.shape != u2.shape:
        raise ValueError(f"dimension mismatch: {u1.shape} vs {u2.shape}")
    diff = u1 - u2
    return np.concatenate([u1, u2, diff, u1 * u2, np.abs(diff)], axis=-1)


def concat_features_grad(u1: np.ndarray, u2: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backpropagate ``g`` (gradient w.r.t. the concatenation) to ``u1`` and ``u2``."""
    d = u1.shape[-1]
    g1, g2, gd, gp, ga = (g[..., i * d : (i + 1) * d] for i in range(5))
    sign = np.sign(u1 - u2)
    du1 = g1 + gd + gp * u2 + ga * sign
    du2 = g2 - gd + gp * u1 - ga * sign
    return du1, du2


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(z: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy of ``sigmoid(z)`` against ``y`` and its gradient in ``z``."""
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(loss.mean()), (sigmoid(z) - y) / z.size


def margin_loss(f_pos, f_neg, n: float):
    """Hinge ``max(0, n - f_pos + f_neg)``; elementwise for arrays."""
    if n <= 0:
        raise ValueError("margin must be positive")
    out = np.maximum(0.0, n - np.asarray(f_pos, dtype=float) + np.asarray(f_neg, dtype=float))
    return float(out) if out.ndim == 0 else out


class MLP:
    """One hidden tanh layer and a scalar linear output: ``w2 . tanh(W1 x + b1) + b2``."""

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator | None = None, zero: bool = False):
        self.in_dim = int(in_dim)
        self.hidden = int(hidden)
        if zero:
            self.params: Params = {
                "W1": np.zeros((self.hidden, self.in_dim)),
                "b1": np.zeros(self.hidden),
                "w2": np.zeros(self.hidden),
                "b2": np.zeros(1),
            }
            return
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {
            "W1": rng.normal(0.0, 1.0 / math.sqrt(self.in_dim), size=(self.hidden, self.in_dim)),
            "b1": np.zeros(self.hidden),
            "w2": rng.normal(0.0, 1.0 / math.sqrt(self.hidden), size=self.hidden),
            "b2": np.zeros(1),
        }

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.in_dim:
            raise ValueError(f"expected input dim {self.in_dim}, got {x.shape[1]}")
        p = self.params
        h = np.tanh(x @ p["W1"].T + p["b1"])
        out = h @ p["w2"] + p["b2"][0]
        return out, (x, h)

    def backward(self, cache: tuple, d_out: np.ndarray) -> tuple[Params, np.ndarray]:
        """Parameter gradients and the gradient w.r.t. the input."""
        x, h = cache
        p = self.params
        d_out = np.asarray(d_out, dtype=float)
        dh = np.outer(d_out, p["w2"]) * (1.0 - h * h)
        grads = {
            "W1": dh.T @ x,
            "b1": dh.sum(axis=0),
            "w2": h.T @ d_out,
            "b2": np.array([d_out.sum()]),
        }
        return grads, dh @ p["W1"]


class ConvMaxPool:
    """Width-``k`` convolution over word columns, ReLU, then max over time."""

    def __init__(self, in_dim: int, filters: int, width: int, rng: np.random.Generator | None = None, zero: bool = False):
        self.in_dim = int(in_dim)
        self.filters = int(filters)
        self.width = int(width)
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = self.in_dim * self.width
        kernel = np.zeros((self.filters, fan_in)) if zero else rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(self.filters, fan_in))
        self.params: Params = {"K": kernel, "bk": np.zeros(self.filters)}

    def _windows(self, x: np.ndarray) -> np.ndarray:
        if x.shape[0] != self.in_dim:
            raise ValueError(f"expected {self.in_dim} rows, got {x.shape[0]}")
        if x.shape[1] < self.width:
            x = np.pad(x, ((0, 0), (0, self.width - x.shape[1])))
        # (d, T, k) -> (T, d*k) with row-major (d, k) flattening
        win = sliding_window_view(x, self.width, axis=1)
        return win.transpose(1, 0, 2).reshape(win.shape[1], -1)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        win = self._windows(np.asarray(x, dtype=float))
        act = np.maximum(win @ self.params["K"].T + self.params["bk"], 0.0)
        arg = act.argmax(axis=0)
        pooled = act[arg, np.arange(self.filters)]
        return pooled, (win, act, arg)

    def backward(self, cache: tuple, d_pooled: np.ndarray) -> Params:
        win, act, arg = cache
        active = act[arg, np.arange(self.filters)] > 0
        d = np.where(active, d_pooled, 0.0)
        return {"K": d[:, None] * win[arg], "bk": d}


class Adam:
    """Adam, or AdamW when ``weight_decay`` is non-zero (decoupled decay)."""

    def __init__(self, params: Mapping[str, np.ndarray], lr: float, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.weight_decay:
                params[k] -= self.lr * self.weight_decay * params[k]
            params[k] -= self.lr * update


def make_optimizer(name: str, params: Mapping[str, np.ndarray], lr: float, weight_decay: float = 0.01) -> Adam:
    key = name.lower()
    if key == "adam":
        return Adam(params, lr)
    if key == "adamw":
        return Adam(params, lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {name!r}; expected 'adam' or 'adamw'")
