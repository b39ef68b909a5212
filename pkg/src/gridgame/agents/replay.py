"""Ring-buffer experience replay."""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: float  # dT for the attacker, threshold index for the defender
    reward: float
    next_obs: np.ndarray
    done: bool


class ReplayBuffer:
    def __init__(self, capacity: int, obs_dim: int, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.action = np.zeros(capacity)
        self.reward = np.zeros(capacity)
        self.done = np.zeros(capacity)
        self.size = 0
        self._pos = 0
        self.rng = np.random.default_rng(seed)
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return self.size

    def add(self, t: Transition) -> None:
        with self._lock:
            i = self._pos
            self.obs[i] = t.obs
            self.next_obs[i] = t.next_obs
            self.action[i] = t.action
            self.reward[i] = t.reward
            self.done[i] = float(t.done)
            self._pos = (i + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def sample(self, batch: int):
        """Uniform batch, no index repeated within it."""
        if self.size == 0:
            raise ValueError("empty buffer")
        batch = min(batch, self.size)
        idx = np.unique(self.rng.integers(0, self.size, size=batch))
        while idx.size < batch:
            extra = self.rng.integers(0, self.size, size=batch - idx.size)
            idx = np.unique(np.concatenate([idx, extra]))
        idx = self.rng.permutation(idx)
        return self.obs[idx], self.action[idx], self.reward[idx], self.next_obs[idx], self.done[idx]
