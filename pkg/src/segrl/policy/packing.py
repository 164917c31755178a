"""Sequence packing of variable-length segment sets.

All segments of a batch of B timesteps live in one (N_total, S) tensor with
``offsets`` marking step boundaries. The visibility mask lets the query of
step b see exactly its own segments and its own proprio token; the key order
is ``[segment_0 .. segment_{N_total-1}, proprio_0 .. proprio_{B-1}]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from ..errors import ContractViolation


@dataclass
class PackedBatch:
    segments: torch.Tensor  # (N_total, S)
    bboxes: torch.Tensor  # (N_total, 4)
    offsets: torch.Tensor  # (B + 1,) int64
    proprio: torch.Tensor  # (B, P)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def batch_size(self) -> int:
        return self.offsets.numel() - 1

    @property
    def num_segments(self) -> int:
        return self.segments.shape[0]

    def counts(self) -> torch.Tensor:
        return self.offsets[1:] - self.offsets[:-1]

    def step_ids(self) -> torch.Tensor:
        """Timestep index of every packed segment, shape (N_total,)."""
        if "step_ids" not in self._cache:
            self._cache["step_ids"] = torch.repeat_interleave(
                torch.arange(self.batch_size), self.counts()
            )
        return self._cache["step_ids"]

    def visibility(self) -> torch.Tensor:
        """Boolean (B, N_total + B) mask; True where query b may attend to a key."""
        if "visibility" not in self._cache:
            b = self.batch_size
            seg = self.step_ids()[None, :] == torch.arange(b)[:, None]
            self._cache["visibility"] = torch.cat([seg, torch.eye(b, dtype=torch.bool)], dim=1)
        return self._cache["visibility"]

    def key_slots(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Gather form of :meth:`visibility`.

        Returns ``(index, valid)`` of shape (B, L) with L = max_b N_b + 1: row b
        lists the packed key indices visible to query b (its segments, then
        its proprio token); padded slots have ``valid`` False.
        """
        if "slots" not in self._cache:
            b = self.batch_size
            counts = self.counts()
            width = int(counts.max()) + 1
            pos = torch.arange(width)[None, :]
            seg_valid = pos < counts[:, None]
            index = self.offsets[:-1, None] + pos
            proprio_slot = pos == counts[:, None]
            index = torch.where(proprio_slot, self.num_segments + torch.arange(b)[:, None], index)
            valid = seg_valid | proprio_slot
            index = torch.where(valid, index, torch.zeros_like(index))
            self._cache["slots"] = (index, valid)
        return self._cache["slots"]

    def to(self, dtype: torch.dtype) -> PackedBatch:
        return PackedBatch(
            self.segments.to(dtype), self.bboxes.to(dtype), self.offsets, self.proprio.to(dtype)
        )

    def unpack(self) -> list[tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
        """Per-step (segments, bboxes, proprio) views, in packing order."""
        out = []
        off = self.offsets.tolist()
        for b in range(self.batch_size):
            sl = slice(off[b], off[b + 1])
            out.append((self.segments[sl], self.bboxes[sl], self.proprio[b]))
        return out

    def select(self, b: int) -> PackedBatch:
        """The single-step batch holding step ``b``."""
        lo, hi = int(self.offsets[b]), int(self.offsets[b + 1])
        return PackedBatch(
            self.segments[lo:hi],
            self.bboxes[lo:hi],
            torch.tensor([0, hi - lo]),
            self.proprio[b : b + 1],
        )


def pack(observations, dtype: torch.dtype = torch.float32) -> PackedBatch:
    """Concatenate a list of SegmentObservations in input order."""
    if len(observations) == 0:
        raise ContractViolation("cannot pack an empty list of observations")
    counts = [o.embeddings.shape[0] for o in observations]
    if min(counts) < 1:
        raise ContractViolation("every observation needs at least one segment")
    offsets = np.zeros(len(counts) + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return PackedBatch(
        segments=torch.from_numpy(np.concatenate([o.embeddings for o in observations])).to(dtype),
        bboxes=torch.from_numpy(np.concatenate([o.bboxes for o in observations])).to(dtype),
        offsets=torch.from_numpy(offsets),
        proprio=torch.from_numpy(np.stack([o.proprio for o in observations])).to(dtype),
    )


def pack_arrays(segments, bboxes, offsets, proprio, dtype: torch.dtype = torch.float32) -> PackedBatch:
    """Build a PackedBatch from already-concatenated numpy arrays."""
    offsets = np.asarray(offsets, dtype=np.int64)
    if offsets[0] != 0 or offsets[-1] != len(segments) or np.any(np.diff(offsets) < 1):
        raise ContractViolation("offsets must start at 0, end at N_total and increase strictly")
    return PackedBatch(
        segments=torch.from_numpy(np.ascontiguousarray(segments)).to(dtype),
        bboxes=torch.from_numpy(np.ascontiguousarray(bboxes)).to(dtype),
        offsets=torch.from_numpy(offsets),
        proprio=torch.from_numpy(np.ascontiguousarray(proprio)).to(dtype),
    )
