"""Transitions, mini-batches and a uniform FIFO replay buffer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Transition:
    state: np.ndarray
    obs: np.ndarray          # (N, obs_dim)
    actions: np.ndarray      # (N,) ints
    reward: float
    next_state: np.ndarray
    next_obs: np.ndarray
    done: bool


@dataclass
class Batch:
    state: np.ndarray        # (B, S)
    obs: np.ndarray          # (B, N, O)
    actions: np.ndarray      # (B, N)
    reward: np.ndarray       # (B,)
    next_state: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray         # (B,) bool

    def __len__(self) -> int:
        return self.reward.shape[0]

    @classmethod
    def from_transitions(cls, items: list[Transition]) -> "Batch":
        if not items:
            raise ValueError("empty batch")
        return cls(
            state=np.stack([t.state for t in items]).astype(np.float64),
            obs=np.stack([t.obs for t in items]).astype(np.float64),
            actions=np.stack([t.actions for t in items]).astype(np.int64),
            reward=np.array([t.reward for t in items], dtype=np.float64),
            next_state=np.stack([t.next_state for t in items]).astype(np.float64),
            next_obs=np.stack([t.next_obs for t in items]).astype(np.float64),
            done=np.array([t.done for t in items], dtype=bool),
        )


class ReplayBuffer:
    """Fixed-capacity ring of transitions; the oldest entry is evicted first."""

    def __init__(self, capacity: int, n_agents: int, obs_dim: int, state_dim: int, rng: np.random.Generator):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity, self.rng = capacity, rng
        self.state = np.zeros((capacity, state_dim))
        self.obs = np.zeros((capacity, n_agents, obs_dim))
        self.actions = np.zeros((capacity, n_agents), dtype=np.int64)
        self.reward = np.zeros(capacity)
        self.next_state = np.zeros((capacity, state_dim))
        self.next_obs = np.zeros((capacity, n_agents, obs_dim))
        self.done = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._head = 0

    def __len__(self) -> int:
        return self.size

    def add(self, t: Transition) -> None:
        if not np.isfinite(t.reward):
            raise ValueError("reward must be finite")
        j = self._head
        self.state[j], self.obs[j], self.actions[j] = t.state, t.obs, t.actions
        self.reward[j], self.next_state[j], self.next_obs[j], self.done[j] = t.reward, t.next_state, t.next_obs, t.done
        self._head = (j + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int) -> Batch:
        if self.size < batch_size:
            raise ValueError(f"buffer holds {self.size} transitions, need {batch_size}")
        idx = self.rng.choice(self.size, size=batch_size, replace=False)
        return Batch(self.state[idx], self.obs[idx], self.actions[idx], self.reward[idx],
                     self.next_state[idx], self.next_obs[idx], self.done[idx])
