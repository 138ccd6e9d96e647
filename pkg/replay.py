"""Fixed-capacity experience replay with uniform sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from errors import InsufficientSamplesError, StructuralError
from nnkit import Rng


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass(frozen=True)
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


def stack_batch(transitions: list[Transition]) -> Batch:
    return Batch(
        states=np.stack([t.state for t in transitions]).astype(np.float64),
        actions=np.array([t.action for t in transitions], dtype=np.int64),
        rewards=np.array([t.reward for t in transitions], dtype=np.float64),
        next_states=np.stack([t.next_state for t in transitions]).astype(np.float64),
        dones=np.array([t.done for t in transitions], dtype=bool),
    )


class ReplayBuffer:
    """Ring buffer; once full, every push evicts exactly the oldest transition."""

    def __init__(self, capacity: int) -> None:
        if int(capacity) <= 0:
            raise StructuralError(f"Replay capacity must be positive, got {capacity}.")
        self.capacity = int(capacity)
        self._storage: list[Transition] = []
        self._cursor = 0

    def __len__(self) -> int:
        return len(self._storage)

    def push(self, transition: Transition) -> None:
        if len(self._storage) < self.capacity:
            self._storage.append(transition)
        else:
            self._storage[self._cursor] = transition
        self._cursor = (self._cursor + 1) % self.capacity

    def is_warm(self, batch_size: int) -> bool:
        return len(self._storage) >= batch_size

    def sample(self, batch_size: int, rng: Rng) -> list[Transition]:
        """Draw ``batch_size`` distinct transitions uniformly."""

        if not self.is_warm(batch_size):
            raise InsufficientSamplesError(
                f"Replay holds {len(self._storage)} transitions, batch needs {batch_size}."
            )
        indices = rng.sample_without_replacement(len(self._storage), batch_size)
        return [self._storage[int(i)] for i in indices]

    def ordered(self) -> list[Transition]:
        """Contents from oldest to newest."""

        if len(self._storage) < self.capacity:
            return list(self._storage)
        return self._storage[self._cursor :] + self._storage[: self._cursor]
