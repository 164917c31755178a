"""Shared builders for the test-suite."""

import numpy as np
import torch

from segrl.perception import SegmentObservation
from segrl.policy import ArchConfig

TINY = ArchConfig(
    model_dim=8,
    decoder_layers=1,
    decoder_heads=1,
    ffn_hidden=16,
    proj_hidden_layers=2,
    proj_hidden_size=8,
    segment_dim=4,
    proprio_dim=2,
    action_dim=2,
)

SMALL = ArchConfig(
    model_dim=16,
    decoder_layers=2,
    decoder_heads=2,
    ffn_hidden=32,
    proj_hidden_layers=2,
    proj_hidden_size=16,
    segment_dim=6,
    proprio_dim=2,
    action_dim=2,
)


def random_obs(rng, n, s, p=2, label="seg"):
    lo = rng.uniform(0.0, 0.6, size=(n, 2))
    hi = lo + rng.uniform(0.05, 0.4, size=(n, 2))
    boxes = np.concatenate([lo, hi], axis=1).astype(np.float32)
    return SegmentObservation(
        rng.normal(size=(n, s)).astype(np.float32),
        boxes,
        [label] * n,
        rng.uniform(0, 1, size=p).astype(np.float32),
    )


def random_actions(rng, b, a=2):
    return torch.from_numpy(rng.uniform(-0.99, 0.99, size=(b, a)).astype(np.float32))
