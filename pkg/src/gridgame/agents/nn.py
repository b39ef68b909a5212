"""Small tanh MLPs with hand-written backprop, Adam, and running normalization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class Mlp:
    """Fully connected net: tanh on hidden layers, linear output.

    Weights are stored as (in, out) matrices so a batch ``x`` of shape
    (n, in) maps through ``x @ W + b``.
    """

    def __init__(self, sizes, rng: np.random.Generator | None = None, out_scale: float = 1.0):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError("need at least an input and an output layer")
        self.sizes = sizes
        rng = rng or np.random.default_rng(0)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            lim = math.sqrt(6.0 / (a + b))  # Glorot uniform
            if k == len(sizes) - 2:
                lim *= out_scale
            self.weights.append(rng.uniform(-lim, lim, size=(a, b)))
            self.biases.append(np.zeros(b))

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Mlp":
        new = Mlp.__new__(Mlp)
        new.sizes = list(self.sizes)
        new.weights = [w.copy() for w in self.weights]
        new.biases = [b.copy() for b in self.biases]
        return new

    def load_from(self, other: "Mlp") -> None:
        for p, q in zip(self.params, other.params):
            p[...] = q

    def soft_update(self, other: "Mlp", tau: float) -> None:
        """self <- tau * other + (1 - tau) * self"""
        for p, q in zip(self.params, other.params):
            p *= 1.0 - tau
            p += tau * q

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=float)
        if h.shape[-1] != self.sizes[0]:
            raise ValueError(f"input has {h.shape[-1]} features, net expects {self.sizes[0]}")
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                h = np.tanh(h)
        return h

    __call__ = forward

    def forward_cache(self, x: np.ndarray):
        h = np.atleast_2d(np.asarray(x, dtype=float))
        if h.shape[-1] != self.sizes[0]:
            raise ValueError(f"input has {h.shape[-1]} features, net expects {self.sizes[0]}")
        acts = [h]
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def backward(self, acts, grad_out: np.ndarray):
        """Gradients of sum(grad_out * output) w.r.t. params and input.

        Returns (param_grads in ``params`` order, input_grad).
        """
        g = np.atleast_2d(grad_out)
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))
        for k in range(len(self.weights) - 1, -1, -1):
            if k < len(self.weights) - 1:
                g = g * (1.0 - acts[k + 1] ** 2)
            grads[2 * k] = acts[k].T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ self.weights[k].T
        return grads, g

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat: np.ndarray) -> None:
        i = 0
        for p in self.params:
            n = p.size
            p[...] = flat[i:i + n].reshape(p.shape)
            i += n


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip: float | None = 10.0):
        self.params = params
        self.lr, self.b1, self.b2, self.eps, self.clip = lr, beta1, beta2, eps, clip
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        if self.clip is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > self.clip:
                grads = [g * (self.clip / norm) for g in grads]
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class RunningNorm:
    """Per-feature running mean/variance (parallel Welford merge)."""

    dim: int
    count: float = 1e-4
    mean: np.ndarray = field(default=None)
    var: np.ndarray = field(default=None)
    frozen: bool = False
    clip: float = 10.0

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.dim)
        if self.var is None:
            self.var = np.ones(self.dim)

    def update(self, x: np.ndarray) -> None:
        if self.frozen:
            return
        x = np.atleast_2d(x)
        n = x.shape[0]
        bm, bv = x.mean(axis=0), x.var(axis=0)
        tot = self.count + n
        d = bm - self.mean
        self.mean = self.mean + d * n / tot
        self.var = (self.var * self.count + bv * n + d * d * self.count * n / tot) / tot
        self.count = tot

    def __call__(self, x: np.ndarray) -> np.ndarray:
        z = (np.asarray(x, dtype=float) - self.mean) / np.sqrt(self.var + 1e-8)
        return np.clip(z, -self.clip, self.clip)

    def state(self) -> dict:
        return {"dim": self.dim, "count": float(self.count), "mean": [float(v) for v in self.mean],
                "var": [float(v) for v in self.var]}

    @classmethod
    def from_state(cls, d: dict) -> "RunningNorm":
        return cls(int(d["dim"]), float(d["count"]), np.array(d["mean"], dtype=float),
                   np.array(d["var"], dtype=float), frozen=True)
