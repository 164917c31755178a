from .networks import (
    AGENT_KINDS,
    Agent,
    ArchConfig,
    actor_forward,
    attention_weights,
    baseline_forward,
    critic_forward,
    deterministic_action,
    init_params,
    sample_action,
)
from .packing import PackedBatch, pack, pack_arrays

__all__ = [
    "AGENT_KINDS",
    "Agent",
    "ArchConfig",
    "PackedBatch",
    "actor_forward",
    "attention_weights",
    "baseline_forward",
    "critic_forward",
    "deterministic_action",
    "init_params",
    "pack",
    "pack_arrays",
    "sample_action",
]
