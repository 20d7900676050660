"""Minimal numpy building blocks for the per-point networks."""

from __future__ import annotations

import numpy as np
from scipy.special import expit

Params = dict[str, np.ndarray]


def silu(x: np.ndarray) -> np.ndarray:
    return x * expit(x)


def silu_grad(x: np.ndarray) -> np.ndarray:
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def init_linear(rng: np.random.Generator, n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    w = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))
    return w, np.zeros(n_out)


def zeros_like_params(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def add_into(acc: Params, grads: Params, scale: float = 1.0) -> None:
    for k, g in grads.items():
        acc[k] += scale * g


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: Params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = zeros_like_params(params)
        self.v = zeros_like_params(params)
        self.t = 0

    def step(self, params: Params, grads: Params, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * ((m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p)


def lr_at_epoch(lr: float, epoch: int, halving_period: int) -> float:
    """Step decay: halve every ``halving_period`` epochs (epochs count from 0)."""
    if halving_period <= 0:
        return lr
    return lr * 0.5 ** (epoch // halving_period)
