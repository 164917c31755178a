"""Replay buffer for variable-length segment observations.

Segment rows of ``obs`` and ``next_obs`` share one flat pool; each
transition owns a contiguous span ``[start, start + n_obs + n_next)``.
Spans are handed out cyclically, so when the pool wraps the spans it
overwrites always belong to the oldest transitions, and eviction stays FIFO.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ContractViolation
from ..perception import SegmentObservation
from ..policy.packing import PackedBatch, pack_arrays


@dataclass
class Transition:
    obs: SegmentObservation
    action: np.ndarray
    reward: float
    done: bool
    next_obs: SegmentObservation


@dataclass
class TransitionBatch:
    obs: PackedBatch
    actions: torch.Tensor  # (B, A)
    rewards: torch.Tensor  # (B,)
    dones: torch.Tensor  # (B,)
    next_obs: PackedBatch
    indices: np.ndarray


class ReplayBuffer:
    def __init__(
        self,
        capacity: int,
        segment_dim: int,
        proprio_dim: int,
        action_dim: int,
        segments_per_transition: int = 24,
    ):
        if capacity < 1:
            raise ContractViolation("capacity must be >= 1")
        self.capacity = capacity
        self.segment_dim = segment_dim
        # np.zeros maps lazily, so an oversized pool costs nothing until touched
        self.pool_rows = capacity * segments_per_transition
        self._emb = np.zeros((self.pool_rows, segment_dim), dtype=np.float32)
        self._box = np.zeros((self.pool_rows, 4), dtype=np.float32)
        self._pool_head = 0

        self._start = np.zeros(capacity, dtype=np.int64)
        self._n_obs = np.zeros(capacity, dtype=np.int64)
        self._n_next = np.zeros(capacity, dtype=np.int64)
        self._proprio = np.zeros((capacity, proprio_dim), dtype=np.float32)
        self._next_proprio = np.zeros((capacity, proprio_dim), dtype=np.float32)
        self._action = np.zeros((capacity, action_dim), dtype=np.float32)
        self._reward = np.zeros(capacity, dtype=np.float32)
        self._done = np.zeros(capacity, dtype=np.float32)
        self._head = 0
        self._size = 0
        self.total_added = 0

    def __len__(self) -> int:
        return self._size

    @property
    def _oldest(self) -> int:
        return (self._head - self._size) % self.capacity

    def _evict_oldest(self):
        self._size -= 1

    def _span_overlaps(self, slot: int, lo: int, hi: int) -> bool:
        s = self._start[slot]
        e = s + self._n_obs[slot] + self._n_next[slot]
        return s < hi and lo < e

    def _grow_pool(self, rows: int) -> None:
        # Live spans keep their row indices; only the tail is new.
        extra = rows - self.pool_rows
        self._emb = np.concatenate([self._emb, np.zeros((extra, self.segment_dim), np.float32)])
        self._box = np.concatenate([self._box, np.zeros((extra, 4), np.float32)])
        self.pool_rows = rows

    def _claim(self, n: int) -> int:
        if n > self.pool_rows:
            self._grow_pool(max(n, 2 * self.pool_rows))
        start = self._pool_head
        regions = [(start, start + n)]
        if start + n > self.pool_rows:
            regions = [(start, self.pool_rows), (0, n)]
            start = 0
        while self._size and any(self._span_overlaps(self._oldest, lo, hi) for lo, hi in regions):
            self._evict_oldest()
        self._pool_head = start + n
        return start

    def add(self, transition: Transition) -> None:
        obs, nxt = transition.obs, transition.next_obs
        n_obs, n_next = obs.num_segments, nxt.num_segments
        if n_obs < 1 or n_next < 1:
            raise ContractViolation("stored observations need at least one segment")
        if self._size == self.capacity:
            self._evict_oldest()
        start = self._claim(n_obs + n_next)
        mid = start + n_obs
        self._emb[start:mid] = obs.embeddings
        self._box[start:mid] = obs.bboxes
        self._emb[mid : mid + n_next] = nxt.embeddings
        self._box[mid : mid + n_next] = nxt.bboxes

        i = self._head
        self._start[i], self._n_obs[i], self._n_next[i] = start, n_obs, n_next
        self._proprio[i] = obs.proprio
        self._next_proprio[i] = nxt.proprio
        self._action[i] = transition.action
        self._reward[i] = transition.reward
        self._done[i] = float(transition.done)
        self._head = (self._head + 1) % self.capacity
        self._size += 1
        self.total_added += 1

    def _slot(self, k: int) -> int:
        """Ring slot of the k-th oldest stored transition."""
        if not 0 <= k < self._size:
            raise IndexError(k)
        return (self._oldest + k) % self.capacity

    def get(self, k: int) -> Transition:
        """The k-th oldest stored transition, reconstructed from the pool."""
        i = self._slot(k)
        s, n, m = self._start[i], self._n_obs[i], self._n_next[i]
        obs = SegmentObservation(
            self._emb[s : s + n].copy(), self._box[s : s + n].copy(), [""] * n, self._proprio[i].copy()
        )
        nxt = SegmentObservation(
            self._emb[s + n : s + n + m].copy(),
            self._box[s + n : s + n + m].copy(),
            [""] * m,
            self._next_proprio[i].copy(),
        )
        return Transition(obs, self._action[i].copy(), float(self._reward[i]), bool(self._done[i]), nxt)

    def _gather(self, starts: np.ndarray, lens: np.ndarray):
        offsets = np.zeros(len(lens) + 1, dtype=np.int64)
        np.cumsum(lens, out=offsets[1:])
        rows = np.repeat(starts - offsets[:-1], lens) + np.arange(offsets[-1])
        return self._emb[rows], self._box[rows], offsets

    def sample(self, batch_size: int, rng: np.random.Generator) -> TransitionBatch:
        """Uniform sample with replacement, returned already packed."""
        if self._size < batch_size or batch_size < 1:
            raise ContractViolation(f"cannot sample {batch_size} from a buffer of size {self._size}")
        k = rng.integers(0, self._size, size=batch_size)
        idx = (self._oldest + k) % self.capacity
        starts, n_obs, n_next = self._start[idx], self._n_obs[idx], self._n_next[idx]
        emb, box, off = self._gather(starts, n_obs)
        nemb, nbox, noff = self._gather(starts + n_obs, n_next)
        return TransitionBatch(
            obs=pack_arrays(emb, box, off, self._proprio[idx]),
            actions=torch.from_numpy(self._action[idx]),
            rewards=torch.from_numpy(self._reward[idx]),
            dones=torch.from_numpy(self._done[idx]),
            next_obs=pack_arrays(nemb, nbox, noff, self._next_proprio[idx]),
            indices=k,
        )
