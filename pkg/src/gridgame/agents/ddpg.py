"""DDPG attacker over the continuous falsification range [0, dT_max]."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Adam, Mlp, RunningNorm


@dataclass
class DdpgConfig:
    hidden: tuple[int, ...] = (64, 64)
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    gamma: float = 0.99
    tau: float = 0.005
    noise_sigma: float = 0.5  # degC
    delta_t_max: float = 2.5


class DdpgAgent:
    def __init__(self, obs_dim: int, config: DdpgConfig | None = None, seed: int = 0):
        self.cfg = cfg = config or DdpgConfig()
        rng = np.random.default_rng(seed)
        self.obs_dim = obs_dim
        self.actor = Mlp([obs_dim, *cfg.hidden, 1], rng, out_scale=0.1)
        self.critic = Mlp([obs_dim + 1, *cfg.hidden, 1], rng)
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.actor_opt = Adam(self.actor.params, cfg.actor_lr)
        self.critic_opt = Adam(self.critic.params, cfg.critic_lr)
        self.norm = RunningNorm(obs_dim)
        self.rng = np.random.default_rng(rng.integers(2**63))

    # the actor's linear output z maps to dT = dT_max * (tanh(z) + 1) / 2
    def _squash(self, z: np.ndarray) -> np.ndarray:
        return self.cfg.delta_t_max * 0.5 * (np.tanh(z) + 1.0)

    def _critic_in(self, obs_n: np.ndarray, a: np.ndarray) -> np.ndarray:
        return np.concatenate([obs_n, (a / self.cfg.delta_t_max).reshape(-1, 1)], axis=1)

    def act(self, obs: np.ndarray, explore: bool = False) -> float:
        z = self.actor.forward(self.norm(obs)[None, :])[0, 0]
        a = float(self._squash(z))
        if explore and self.cfg.noise_sigma > 0:
            a += self.cfg.noise_sigma * float(self.rng.standard_normal())
        return float(min(max(a, 0.0), self.cfg.delta_t_max))

    def update(self, batch) -> tuple[float, float]:
        """One critic and one actor step. Returns (critic loss, mean Q of the actor's actions)."""
        obs, act, rew, nxt, done = batch
        cfg = self.cfg
        n = obs.shape[0]
        if n == 0:
            raise ValueError("empty batch")
        o, o2 = self.norm(obs), self.norm(nxt)
        a2 = self._squash(self.target_actor.forward(o2)[:, 0])
        q2 = self.target_critic.forward(self._critic_in(o2, a2))[:, 0]
        y = rew + cfg.gamma * (1.0 - done) * q2

        loss, grads = self.critic_loss_grads(o, act, y)
        self.critic_opt.step(grads)
        qpi, a_grads = self.actor_objective_grads(o)
        self.actor_opt.step(a_grads)

        self.target_actor.soft_update(self.actor, cfg.tau)
        self.target_critic.soft_update(self.critic, cfg.tau)
        return loss, qpi

    def critic_loss_grads(self, o: np.ndarray, act: np.ndarray, y: np.ndarray):
        """Mean squared TD error on normalized observations, and its parameter gradients."""
        n = o.shape[0]
        q, acts = self.critic.forward_cache(self._critic_in(o, act))
        err = q[:, 0] - y
        grads, _ = self.critic.backward(acts, (2.0 / n) * err[:, None])
        return float(np.mean(err ** 2)), grads

    def actor_objective_grads(self, o: np.ndarray):
        """Mean Q(s, pi(s)) and the actor gradients of its negation (the minimized loss)."""
        n = o.shape[0]
        z, a_acts = self.actor.forward_cache(o)
        a_pi = self._squash(z[:, 0])
        qpi, c_acts = self.critic.forward_cache(self._critic_in(o, a_pi))
        _, g_in = self.critic.backward(c_acts, np.full((n, 1), -1.0 / n))
        dq_da = g_in[:, -1] / self.cfg.delta_t_max
        da_dz = self.cfg.delta_t_max * 0.5 * (1.0 - np.tanh(z[:, 0]) ** 2)
        grads, _ = self.actor.backward(a_acts, (dq_da * da_dz)[:, None])
        return float(np.mean(qpi)), grads
