"""DQN defender over the discrete threshold grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Adam, Mlp, RunningNorm


@dataclass
class DqnConfig:
    n_actions: int = 11
    hidden: tuple[int, ...] = (64, 64)
    lr: float = 1e-3
    gamma: float = 0.99
    target_sync: int = 500  # updates between hard target copies
    eps_start: float = 1.0
    eps_end: float = 0.05


def greedy(q: np.ndarray) -> int:
    # np.argmax returns the first maximum, so ties go to the lowest index
    return int(np.argmax(q))


class DqnAgent:
    def __init__(self, obs_dim: int, config: DqnConfig | None = None, seed: int = 0):
        self.cfg = cfg = config or DqnConfig()
        rng = np.random.default_rng(seed)
        self.obs_dim = obs_dim
        self.q_net = Mlp([obs_dim, *cfg.hidden, cfg.n_actions], rng)
        self.target_q = self.q_net.copy()
        self.opt = Adam(self.q_net.params, cfg.lr)
        self.norm = RunningNorm(obs_dim)
        self.rng = np.random.default_rng(rng.integers(2**63))
        self.updates = 0

    def q_values(self, obs: np.ndarray) -> np.ndarray:
        return self.q_net.forward(self.norm(obs)[None, :])[0]

    def act(self, obs: np.ndarray, eps: float = 0.0) -> int:
        if not 0.0 <= eps <= 1.0:
            raise ValueError("eps must lie in [0, 1]")
        if eps > 0.0 and self.rng.random() < eps:
            return int(self.rng.integers(self.cfg.n_actions))
        return greedy(self.q_values(obs))

    def update(self, batch) -> float:
        obs, act, rew, nxt, done = batch
        n = obs.shape[0]
        if n == 0:
            raise ValueError("empty batch")
        cfg = self.cfg
        q2 = self.target_q.forward(self.norm(nxt)).max(axis=1)
        y = rew + cfg.gamma * (1.0 - done) * q2
        loss, grads = self.loss_grads(self.norm(obs), act, y)
        self.opt.step(grads)
        self.updates += 1
        if self.updates % cfg.target_sync == 0:
            self.target_q.load_from(self.q_net)
        return loss

    def loss_grads(self, o: np.ndarray, act: np.ndarray, y: np.ndarray):
        """Mean squared error of Q(s, a) against targets ``y``, with parameter gradients."""
        n = o.shape[0]
        q, acts = self.q_net.forward_cache(o)
        ai = act.astype(int)
        err = q[np.arange(n), ai] - y
        g = np.zeros_like(q)
        g[np.arange(n), ai] = (2.0 / n) * err
        grads, _ = self.q_net.backward(acts, g)
        return float(np.mean(err ** 2)), grads
