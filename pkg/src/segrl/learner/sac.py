"""Soft actor-critic updates for the packed segment agents."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from ..errors import ConfigError, ContractViolation, TrainingFault
from ..policy.networks import Agent, sample_action
from .buffer import ReplayBuffer, TransitionBatch

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class SacConfig:
    gamma: float = 0.80
    tau: float = 0.01
    actor_lr: float = 3e-4
    critic_lr: float = 5e-4
    alpha_lr: float = 3e-4
    batch_size: int = 128
    actor_update_freq: int = 1
    critic_update_freq: int = 1
    target_update_freq: int = 2
    target_entropy: float | None = None
    num_envs: int = 4
    updates_per_step: int = 1
    warmup_steps: int = 1000
    buffer_capacity: int = 200_000

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("tau must lie in (0, 1]")
        freqs = (self.actor_update_freq, self.critic_update_freq, self.target_update_freq)
        if min(freqs) < 1:
            raise ConfigError("update frequencies must be >= 1")
        if min(self.batch_size, self.num_envs, self.buffer_capacity) < 1 or self.updates_per_step < 0:
            raise ConfigError("batch_size, num_envs and buffer_capacity must be positive")

    @property
    def utd(self) -> float:
        return self.updates_per_step / self.num_envs

    def to_dict(self) -> dict:
        return asdict(self)


def _check_finite(name: str, value: torch.Tensor, **diag):
    if not torch.isfinite(value).all():
        details = ", ".join(f"{k}={v}" for k, v in diag.items())
        raise TrainingFault(f"non-finite {name} ({details})")


class Learner:
    """Optimiser state and counters around one Agent."""

    def __init__(self, agent: Agent, cfg: SacConfig, seed: int = 0):
        self.agent = agent
        self.cfg = cfg
        self.target_entropy = (
            -float(agent.arch.action_dim) if cfg.target_entropy is None else float(cfg.target_entropy)
        )
        adam = dict(betas=ADAM_BETAS, eps=ADAM_EPS, fused=True)
        self.actor_opt = torch.optim.Adam(agent.actor.parameters(), lr=cfg.actor_lr, **adam)
        self.critic_opt = torch.optim.Adam(agent.critic.parameters(), lr=cfg.critic_lr, **adam)
        self.alpha_opt = torch.optim.Adam([agent.log_alpha], lr=cfg.alpha_lr, **adam)
        self.critic_params = list(agent.critic.parameters())
        self.generator = torch.Generator().manual_seed(int(seed))
        self.num_updates = 0
        self.num_soft_updates = 0


@torch.no_grad()
def bellman_target(agent: Agent, batch: TransitionBatch, gamma: float, generator=None):
    """r + gamma * (1 - done) * (min target Q(s', a') - alpha * log pi(a'|s'))."""
    mean, log_std = agent.actor(batch.next_obs)
    next_action, next_log_prob = sample_action(mean, log_std, generator)
    q1, q2 = agent.critic_target(batch.next_obs, next_action)
    soft_value = torch.min(q1, q2) - agent.alpha * next_log_prob
    return batch.rewards + gamma * (1.0 - batch.dones) * soft_value


def critic_update(learner: Learner, batch: TransitionBatch) -> dict:
    agent = learner.agent
    y = bellman_target(agent, batch, learner.cfg.gamma, learner.generator)
    q1, q2 = agent.critic(batch.obs, batch.actions)
    loss = ((q1 - y).pow(2) + (q2 - y).pow(2)).mean()
    _check_finite("critic loss", loss, update=learner.num_updates, y_max=float(y.abs().max()))
    learner.critic_opt.zero_grad(set_to_none=True)
    loss.backward()
    learner.critic_opt.step()
    q = torch.cat([q1.detach(), q2.detach()])
    loss = loss.detach()
    return {"critic_loss": float(loss), "q_mean": float(q.mean()), "q_std": float(q.std())}


def actor_update(learner: Learner, batch: TransitionBatch) -> tuple[dict, torch.Tensor]:
    """One actor step with the critics frozen; returns metrics and detached log pi."""
    agent = learner.agent
    mean, log_std = agent.actor(batch.obs)
    action, log_prob = sample_action(mean, log_std, learner.generator)
    for p in learner.critic_params:
        p.requires_grad_(False)
    try:
        q1, q2 = agent.critic(batch.obs, action)
    finally:
        for p in learner.critic_params:
            p.requires_grad_(True)
    loss = (agent.alpha.detach() * log_prob - torch.min(q1, q2)).mean()
    _check_finite("actor loss", loss, update=learner.num_updates)
    learner.actor_opt.zero_grad(set_to_none=True)
    loss.backward()
    learner.actor_opt.step()
    log_prob = log_prob.detach()
    return {"actor_loss": float(loss.detach()), "entropy": float(-log_prob.mean())}, log_prob


def temperature_update(learner: Learner, log_prob: torch.Tensor) -> dict:
    """Step log-alpha towards the target entropy, given samples of log pi."""
    agent = learner.agent
    loss = (-agent.log_alpha.exp() * (log_prob + learner.target_entropy)).mean()
    _check_finite("temperature loss", loss, update=learner.num_updates)
    learner.alpha_opt.zero_grad(set_to_none=True)
    loss.backward()
    learner.alpha_opt.step()
    return {"alpha_loss": float(loss.detach()), "alpha": float(agent.alpha.detach())}


@torch.no_grad()
def soft_update(online: torch.nn.Module, target: torch.nn.Module, tau: float) -> None:
    """target <- (1 - tau) * target + tau * online, parameter by parameter."""
    src = dict(online.named_parameters())
    dst = dict(target.named_parameters())
    if src.keys() != dst.keys() or any(src[k].shape != dst[k].shape for k in src):
        raise ContractViolation("online and target parameter trees differ")
    names = list(dst)
    torch._foreach_lerp_([dst[k] for k in names], [src[k] for k in names], tau)


def update(learner: Learner, batch: TransitionBatch) -> dict:
    """One gradient update honouring the critic/actor/target cadences."""
    cfg = learner.cfg
    learner.num_updates += 1
    u = learner.num_updates
    metrics: dict = {}
    if u % cfg.critic_update_freq == 0:
        metrics.update(critic_update(learner, batch))
    if u % cfg.actor_update_freq == 0:
        actor_metrics, log_prob = actor_update(learner, batch)
        metrics.update(actor_metrics)
        metrics.update(temperature_update(learner, log_prob))
    if u % cfg.target_update_freq == 0:
        soft_update(learner.agent.critic, learner.agent.critic_target, cfg.tau)
        learner.num_soft_updates += 1
    return metrics


def train_step(learner: Learner, buffer: ReplayBuffer, rng: np.random.Generator) -> dict:
    """Apply ``updates_per_step`` gradient updates after one vectorised env step."""
    if len(buffer) < learner.cfg.batch_size:
        raise ContractViolation("buffer holds fewer transitions than one batch")
    sums: dict = {}
    counts: dict = {}
    for _ in range(learner.cfg.updates_per_step):
        for key, value in update(learner, buffer.sample(learner.cfg.batch_size, rng)).items():
            sums[key] = sums.get(key, 0.0) + value
            counts[key] = counts.get(key, 0) + 1
    metrics = {k: sums[k] / counts[k] for k in sums}
    metrics["alpha"] = float(learner.agent.alpha.detach())
    metrics["buffer_size"] = len(buffer)
    metrics["num_updates"] = learner.num_updates
    return metrics
