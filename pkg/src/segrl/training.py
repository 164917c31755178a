"""Environment collection, SAC updates and periodic evaluation for one seed."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .env import EnvConfig, ToyEnv
from .evaluation.rollout import evaluate
from .evaluation.stats import EvalReport
from .learner import Learner, ReplayBuffer, SacConfig, Transition, train_step
from .perception import Observer
from .policy import Agent, ArchConfig, init_params, pack, sample_action
from .seeding import ACTION_NOISE, BUFFER_SAMPLING, INIT, TRAIN_ENV, derive_seed


@dataclass(frozen=True)
class EvalSettings:
    every: int = 2000
    episodes: int = 10
    bootstrap_reps: int = 2000

    def to_dict(self) -> dict:
        return {"every": self.every, "episodes": self.episodes, "bootstrap_reps": self.bootstrap_reps}


@dataclass
class EvalPoint:
    env_step: int
    returns: list[float]
    iqm: float
    ci_low: float
    ci_high: float

    @property
    def mean(self) -> float:
        return float(np.mean(self.returns))


@dataclass
class _Slot:
    state: object
    obs: object
    episode_return: float = 0.0
    episode_index: int = 0


@dataclass
class Trainer:
    """Single-seed training run that can be advanced incrementally.

    ``env_step`` counts environment transitions across all parallel envs.
    Evaluation happens whenever ``env_step`` lands on a multiple of
    ``eval.every``, including step 0.
    """

    env_cfg: EnvConfig
    arch: ArchConfig
    sac: SacConfig
    seed: int
    agent_kind: str = "segment"
    kernel_size: int = 3
    min_pixels: int = 4
    eval: EvalSettings = field(default_factory=EvalSettings)
    agent: Agent | None = None
    env_step: int = 0
    on_metrics: object = None
    on_eval: object = None

    def __post_init__(self):
        mode = "segment" if self.agent_kind == "segment" else "global"
        self.observer = Observer(self.env_cfg, self.kernel_size, self.min_pixels, mode)
        if self.agent is None:
            self.agent = init_params(self.arch, derive_seed(self.seed, INIT), self.agent_kind)
        self.learner = Learner(self.agent, self.sac, derive_seed(self.seed, ACTION_NOISE, 1))
        self.buffer = ReplayBuffer(
            self.sac.buffer_capacity, self.arch.segment_dim, self.arch.proprio_dim, self.arch.action_dim
        )
        self.env = ToyEnv(self.env_cfg)
        # a resumed run keeps distinct episode seeds by starting from its step
        self._episode_counter = self.env_step
        self._action_rng = np.random.default_rng(derive_seed(self.seed, ACTION_NOISE, 0, self.env_step))
        self._noise = torch.Generator().manual_seed(derive_seed(self.seed, ACTION_NOISE, 2, self.env_step))
        self._sample_rng = np.random.default_rng(derive_seed(self.seed, BUFFER_SAMPLING, self.env_step))
        self._slots = [self._new_episode() for _ in range(self.sac.num_envs)]
        # a resumed state at an eval step was evaluated before it was saved
        self._last_eval_step = self.env_step if self.env_step > 0 else None
        self.evals: list[EvalPoint] = []
        self.episode_returns: list[float] = []

    def _new_episode(self) -> _Slot:
        index = self._episode_counter
        self._episode_counter += 1
        state = self.env.reset(derive_seed(self.seed, TRAIN_ENV, index))
        return _Slot(state, self.observer(state), 0.0, index)

    @property
    def warming_up(self) -> bool:
        return self.env_step < self.sac.warmup_steps

    @property
    def updates_ready(self) -> bool:
        return len(self.buffer) >= max(self.sac.batch_size, min(self.sac.warmup_steps, self.sac.buffer_capacity))

    @torch.no_grad()
    def _act(self) -> np.ndarray:
        n, a = len(self._slots), self.arch.action_dim
        if self.warming_up:
            return self._action_rng.uniform(-1.0, 1.0, size=(n, a))
        mean, log_std = self.agent.actor(pack([s.obs for s in self._slots]))
        action, _ = sample_action(mean, log_std, self._noise)
        return action.numpy().astype(np.float64)

    def collect(self) -> list[float]:
        """One vectorised env step; returns the normalized returns of finished episodes."""
        actions = self._act()
        finished = []
        for i, slot in enumerate(self._slots):
            state, reward, done = self.env.step(slot.state, actions[i])
            next_obs = self.observer(state)
            # the horizon is a time limit, not a terminal state
            self.buffer.add(Transition(slot.obs, actions[i].astype(np.float32), reward, False, next_obs))
            slot.episode_return += reward
            slot.state, slot.obs = state, next_obs
            if done:
                finished.append(slot.episode_return / self.env_cfg.horizon)
                self._slots[i] = self._new_episode()
        self.env_step += len(self._slots)
        self.episode_returns.extend(finished)
        return finished

    def run_eval(self) -> EvalPoint:
        returns = evaluate(self.agent, self.observer, self.eval.episodes, derive_seed(self.seed, self.env_step))
        report = EvalReport.from_scores([returns], reps=self.eval.bootstrap_reps, seed=self.seed)
        point = EvalPoint(self.env_step, returns, report.iqm, report.ci_low, report.ci_high)
        self.evals.append(point)
        self._last_eval_step = self.env_step
        if self.on_eval is not None:
            self.on_eval(point)
        return point

    def _maybe_eval(self):
        if self.eval.every > 0 and self.env_step % self.eval.every == 0 and self._last_eval_step != self.env_step:
            self.run_eval()

    def train_until(self, env_step: int) -> None:
        """Advance to ``env_step`` (rounded up to a whole vector step)."""
        self._maybe_eval()
        while self.env_step < env_step:
            finished = self.collect()
            record = {"step": self.env_step}
            if self.updates_ready and not self.warming_up:
                record.update(train_step(self.learner, self.buffer, self._sample_rng))
            if finished:
                record["episode_return"] = float(np.mean(finished))
            if self.on_metrics is not None and len(record) > 1:
                self.on_metrics(record)
            self._maybe_eval()
