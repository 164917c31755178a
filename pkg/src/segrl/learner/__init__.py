from .buffer import ReplayBuffer, Transition, TransitionBatch
from .sac import (
    Learner,
    SacConfig,
    actor_update,
    bellman_target,
    critic_update,
    soft_update,
    temperature_update,
    train_step,
    update,
)

__all__ = [
    "Learner",
    "ReplayBuffer",
    "SacConfig",
    "Transition",
    "TransitionBatch",
    "actor_update",
    "bellman_target",
    "critic_update",
    "soft_update",
    "temperature_update",
    "train_step",
    "update",
]
