"""Ring-buffer experience storage shared by all trainers."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    done: bool


class Batch(NamedTuple):
    obs: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray

    def __len__(self):
        return self.obs.shape[0]

    @classmethod
    def from_transitions(cls, transitions) -> "Batch":
        transitions = list(transitions)
        return cls(
            np.array([t.obs for t in transitions], dtype=np.float64),
            np.array([t.action for t in transitions], dtype=np.float64),
            np.array([t.reward for t in transitions], dtype=np.float64),
            np.array([t.next_obs for t in transitions], dtype=np.float64),
            np.array([t.done for t in transitions], dtype=np.float64),
        )


class ReplayBuffer:
    """Fixed-capacity FIFO store; once full each insert overwrites the oldest entry."""

    def __init__(self, capacity: int, obs_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.obs = np.zeros((capacity, obs_dim))
        self.action = np.zeros((capacity, action_dim))
        self.reward = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.cursor = 0
        self.size = 0
        # number of rows handed out by sample(); lets tests audit buffer use
        self.rows_read = 0

    def __len__(self):
        return self.size

    def add(self, obs, action, reward, next_obs, done):
        i = self.cursor
        self.obs[i] = obs
        self.action[i] = action
        self.reward[i] = reward
        self.next_obs[i] = next_obs
        self.done[i] = float(done)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def add_transition(self, t: Transition):
        self.add(t.obs, t.action, t.reward, t.next_obs, t.done)

    def extend(self, transitions):
        for t in transitions:
            self.add_transition(t)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        self.rows_read += batch_size
        return self._take(idx)

    def _take(self, idx) -> Batch:
        return Batch(self.obs[idx], self.action[idx], self.reward[idx], self.next_obs[idx], self.done[idx])

    def ordered(self) -> Batch:
        """Stored transitions from oldest to newest."""
        if self.size < self.capacity:
            idx = np.arange(self.size)
        else:
            idx = (np.arange(self.capacity) + self.cursor) % self.capacity
        return self._take(idx)

    def resized(self, capacity: int) -> "ReplayBuffer":
        """Copy into a buffer of another capacity, keeping the newest entries."""
        out = ReplayBuffer(capacity, self.obs_dim, self.action_dim)
        data = self.ordered()
        start = max(0, len(data) - capacity)
        for i in range(start, len(data)):
            out.add(data.obs[i], data.action[i], data.reward[i], data.next_obs[i], data.done[i])
        return out

    def __eq__(self, other):
        if not isinstance(other, ReplayBuffer):
            return NotImplemented
        return (
            self.capacity == other.capacity and self.cursor == other.cursor and self.size == other.size
            and all(np.array_equal(getattr(self, k), getattr(other, k))
                    for k in ("obs", "action", "reward", "next_obs", "done"))
        )
