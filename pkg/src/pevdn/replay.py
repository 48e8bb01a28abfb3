"""Episode-granular ring buffer held locally by each agent."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .env import LocalEpisode


class Batch(NamedTuple):
    """Transitions of the sampled episodes, concatenated in index order.

    ``segments[j]`` is the ``(start, stop)`` slice of the ``j``-th sampled
    episode inside the flat arrays.
    """

    taus: np.ndarray
    actions: np.ndarray
    next_taus: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    segments: list
    episode_ids: list

    def __len__(self):
        return len(self.actions)


class ReplayBuffer:
    """Fixed-capacity ring of episodes; the newest episode evicts the oldest.

    Episodes live in preallocated ``(capacity, max_len, ...)`` arrays padded
    past each episode's length, so gathering a minibatch is one fancy index.
    ``max_len`` grows on demand when a longer episode arrives.
    """

    def __init__(self, capacity: int, max_len: int = 1):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._len = 0
        self._next = 0
        self._max_len = max(1, int(max_len))
        self._width = None
        self._ids = np.zeros(capacity, dtype=np.int64)
        self._lengths = np.zeros(capacity, dtype=np.int64)

    def __len__(self):
        return self._len

    def _allocate(self, width: int, max_len: int):
        old = None if self._width is None else (self._taus, self._next_taus, self._actions,
                                                 self._rewards, self._dones, self._max_len)
        self._width = width
        self._taus = np.zeros((self.capacity, max_len, width))
        self._next_taus = np.zeros((self.capacity, max_len, width))
        self._actions = np.zeros((self.capacity, max_len), dtype=np.int64)
        self._rewards = np.zeros((self.capacity, max_len))
        self._dones = np.zeros((self.capacity, max_len), dtype=bool)
        if old is not None:
            taus, next_taus, actions, rewards, dones, n = old
            self._taus[:, :n] = taus
            self._next_taus[:, :n] = next_taus
            self._actions[:, :n] = actions
            self._rewards[:, :n] = rewards
            self._dones[:, :n] = dones
        self._max_len = max_len

    def __getitem__(self, i) -> LocalEpisode:
        i = int(i)
        if i < 0:
            i += self._len
        if not 0 <= i < self._len:
            raise IndexError("buffer index out of range")
        n = self._lengths[i]
        return LocalEpisode(self._taus[i, :n].copy(), self._actions[i, :n].copy(),
                            self._next_taus[i, :n].copy(), self._rewards[i, :n].copy(),
                            self._dones[i, :n].copy(), int(self._ids[i]))

    def append(self, episode: LocalEpisode):
        n = len(episode.actions)
        if n == 0:
            raise ValueError("cannot store an empty episode")
        width = episode.taus.shape[1]
        if self._width is None or n > self._max_len:
            self._allocate(width, max(n, self._max_len))
        elif width != self._width:
            raise ValueError(f"window width {width} differs from stored width {self._width}")
        j = self._next
        self._taus[j, :n] = episode.taus
        self._next_taus[j, :n] = episode.next_taus
        self._actions[j, :n] = episode.actions
        self._rewards[j, :n] = episode.rewards
        self._dones[j, :n] = episode.dones
        self._lengths[j] = n
        self._ids[j] = episode.episode_id
        self._len = min(self._len + 1, self.capacity)
        self._next = (j + 1) % self.capacity

    @property
    def ids(self) -> np.ndarray:
        """Episode ids by slot (a view; do not modify)."""
        return self._ids[: self._len]

    def episode_ids(self) -> list[int]:
        return self.ids.tolist()

    def gather(self, indices) -> Batch:
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        if len(idx) and (idx.min() < 0 or idx.max() >= self._len):
            raise IndexError("buffer index out of range")
        if not len(idx):
            width = self._width or 0
            return Batch(np.zeros((0, width)), np.zeros(0, dtype=np.int64), np.zeros((0, width)),
                         np.zeros(0), np.zeros(0, dtype=bool), [], [])
        lengths = self._lengths[idx]
        stops = np.cumsum(lengths)
        segments = list(zip((stops - lengths).tolist(), stops.tolist()))
        if self._max_len == 1:
            pick = (idx, 0)
        else:
            mask = np.arange(self._max_len)[None, :] < lengths[:, None]
            rows, cols = np.nonzero(mask)
            pick = (idx[rows], cols)
        return Batch(
            taus=self._taus[pick],
            actions=self._actions[pick],
            next_taus=self._next_taus[pick],
            rewards=self._rewards[pick],
            dones=self._dones[pick],
            segments=segments,
            episode_ids=self._ids[idx].tolist(),
        )
