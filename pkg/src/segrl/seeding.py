"""Deterministic derivation of per-purpose seeds from one run seed."""

import numpy as np

TRAIN_ENV = 1
EVAL_ENV = 2
ACTION_NOISE = 3
BUFFER_SAMPLING = 4
PERTURBATION = 5
INIT = 6


def derive_seed(seed: int, *keys: int) -> int:
    """A 63-bit seed that depends only on ``seed`` and the key path."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(int(k) for k in keys))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int((int(hi) << 32 | int(lo)) & (2**63 - 1))
