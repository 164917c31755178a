"""Deterministic evaluation rollouts, perturbation suites and attention traces."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from ..env import ToyEnv
from ..perception import Observer, Perturbation
from ..policy import Agent, attention_weights, deterministic_action, pack
from ..seeding import EVAL_ENV, PERTURBATION, derive_seed
from .stats import DEFAULT_BOOTSTRAP_REPS, EvalReport

ATTENTION_SCHEMA = "segrl.attention/1"


def _episode_rngs(seed: int, episodes: int):
    return [np.random.default_rng(derive_seed(seed, PERTURBATION, i)) for i in range(episodes)]


@torch.no_grad()
def evaluate(
    agent: Agent,
    observer: Observer,
    episodes: int,
    seed: int,
    perturbations=(),
    on_step=None,
) -> list[float]:
    """Normalized returns sum(r)/H of ``episodes`` deterministic episodes.

    Episodes run in lockstep and share one batched forward pass per step.
    ``on_step(t, observations, actions)`` is called after every step.
    """
    if episodes <= 0:
        return []
    env = ToyEnv(observer.env_cfg)
    states = [env.reset(derive_seed(seed, EVAL_ENV, i)) for i in range(episodes)]
    rngs = _episode_rngs(seed, episodes) if perturbations else [None] * episodes
    totals = np.zeros(episodes)
    horizon = observer.env_cfg.horizon
    for t in range(horizon):
        obs = [observer(s, perturbations, r) for s, r in zip(states, rngs)]
        mean, _ = agent.actor(pack(obs))
        actions = deterministic_action(mean).numpy().astype(np.float64)
        for i in range(episodes):
            states[i], reward, _ = env.step(states[i], actions[i])
            totals[i] += reward
        if on_step is not None:
            on_step(t, obs, actions)
    return (totals / horizon).tolist()


def robustness_suite(
    agent: Agent,
    observer: Observer,
    perturbations,
    episodes: int,
    seed: int,
    reps: int = DEFAULT_BOOTSTRAP_REPS,
) -> dict[str, EvalReport]:
    """One EvalReport per named perturbation set, plus the unperturbed ``"none"``.

    ``perturbations`` maps a name to a Perturbation or a sequence of them.
    Every perturbed report stores ``delta_iqm`` against ``"none"``.
    """
    base_scores = evaluate(agent, observer, episodes, seed)
    reports = {"none": EvalReport.from_scores([base_scores], reps=reps, seed=seed, perturbation="none")}
    base = reports["none"].iqm
    for name, perts in dict(perturbations).items():
        if isinstance(perts, Perturbation):
            perts = (perts,)
        perts = tuple(perts)
        stats = {"min_segments": None, "max_segments": None, "actions_finite": True, "actions_in_range": True}

        def watch(t, obs, actions, stats=stats):
            counts = [o.num_segments for o in obs]
            lo, hi = min(counts), max(counts)
            stats["min_segments"] = lo if stats["min_segments"] is None else min(lo, stats["min_segments"])
            stats["max_segments"] = hi if stats["max_segments"] is None else max(hi, stats["max_segments"])
            stats["actions_finite"] &= bool(np.isfinite(actions).all())
            stats["actions_in_range"] &= bool((np.abs(actions) <= 1.0).all())

        scores = evaluate(agent, observer, episodes, seed, perts, on_step=watch)
        report = EvalReport.from_scores(
            [scores], reps=reps, seed=seed, perturbation="+".join(p.describe() for p in perts) or "none"
        )
        report.metadata.update(stats)
        report.metadata["delta_iqm"] = report.iqm - base
        reports[name] = report
    return reports


@torch.no_grad()
def export_attention_rollout(
    agent: Agent,
    observer: Observer,
    seed: int,
    out_path,
    network: str = "critic",
    perturbations=(),
) -> dict:
    """Roll out one deterministic episode and write per-step attention to JSON."""
    env = ToyEnv(observer.env_cfg)
    state = env.reset(derive_seed(seed, EVAL_ENV, 0))
    rng = _episode_rngs(seed, 1)[0] if perturbations else None
    records = []
    done = False
    t = 0
    while not done:
        obs = observer(state, perturbations, rng)
        batch = pack([obs])
        mean, _ = agent.actor(batch)
        action = deterministic_action(mean)
        entries = attention_weights(agent, batch, network, actions=action if network == "critic" else None)[0]
        tokens = []
        for (role, where, weight), label in zip(entries, list(obs.labels) + [None]):
            token = {"role": role, "bbox": where if role == "segment" else None, "weight": weight}
            if label is not None:
                token["label"] = label
            tokens.append(token)
        state, reward, done = env.step(state, action[0].numpy().astype(np.float64))
        records.append({"t": t, "num_segments": obs.num_segments, "reward": reward, "tokens": tokens})
        t += 1
    trace = {"schema": ATTENTION_SCHEMA, "network": network, "seed": seed, "records": records}
    Path(out_path).write_text(json.dumps(trace))
    return trace
