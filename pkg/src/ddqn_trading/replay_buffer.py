"""Fixed-capacity FIFO transition store with uniform sampling."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import InsufficientData


class Transition(NamedTuple):
    """One environment step.

    ``state`` and ``next_state`` are flat observation vectors (the network
    input layout), so a sampled batch stacks straight into a matrix.
    """

    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool


class ReplayBuffer:
    def __init__(self, capacity: int = 100_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self._storage: list[Transition] = []
        self.write_index = 0

    def __len__(self) -> int:
        return len(self._storage)

    @property
    def count(self) -> int:
        return len(self._storage)

    def push(self, t: Transition) -> None:
        if len(self._storage) < self.capacity:
            self._storage.append(t)
        else:
            self._storage[self.write_index] = t
        self.write_index = (self.write_index + 1) % self.capacity

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        # with replacement, any non-empty buffer can fill a batch
        if not self._storage:
            raise InsufficientData("cannot sample from an empty buffer")
        return rng.integers(0, len(self._storage), size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        """Uniform draw with replacement."""
        return [self._storage[i] for i in self.sample_indices(batch_size, rng)]

    def contents(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        if len(self._storage) < self.capacity:
            return list(self._storage)
        return self._storage[self.write_index :] + self._storage[: self.write_index]


def stack_batch(batch: list[Transition]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    states = np.stack([t.state for t in batch])
    actions = np.fromiter((t.action for t in batch), dtype=np.int64, count=len(batch))
    rewards = np.fromiter((t.reward for t in batch), dtype=np.float64, count=len(batch))
    next_states = np.stack([t.next_state for t in batch])
    dones = np.fromiter((t.done for t in batch), dtype=bool, count=len(batch))
    return states, actions, rewards, next_states, dones
