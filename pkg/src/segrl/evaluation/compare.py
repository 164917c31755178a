"""Paired training of two agent kinds on matched seeds and budgets."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

from ..training import EvalPoint, Trainer

CURVE_HEADER = ("agent", "seed", "env_step", "iqm_return", "ci_low", "ci_high")


def steps_to_threshold(curve: list[EvalPoint], threshold: float) -> int | None:
    """First evaluated env step whose IQM return reaches ``threshold``."""
    for point in curve:
        if point.iqm >= threshold:
            return point.env_step
    return None


@dataclass
class Comparison:
    agents: tuple[str, str]
    threshold: float
    curves: dict = field(default_factory=dict)  # (agent_label, seed) -> list[EvalPoint]
    input_dims: dict = field(default_factory=dict)

    def rows(self):
        for (label, seed), curve in sorted(self.curves.items(), key=lambda kv: (kv[0][1], kv[0][0])):
            for p in curve:
                yield (label, seed, p.env_step, p.iqm, p.ci_low, p.ci_high)

    def steps(self, label: str, seed: int) -> int | None:
        return steps_to_threshold(self.curves[(label, seed)], self.threshold)

    def first_no_later(self, seed: int) -> bool:
        """Did the first agent reach the threshold no later than the second?"""
        a, b = self._labels()
        sa, sb = self.steps(a, seed), self.steps(b, seed)
        return sa is not None and (sb is None or sa <= sb)

    def _labels(self):
        a, b = self.agents
        return (a, b) if a != b else (f"{a}_a", f"{b}_b")

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CURVE_HEADER)
            writer.writerows(self.rows())
        return path


def _decided(cmp: Comparison, seed: int, budget: int, step: int) -> bool:
    a, b = cmp._labels()
    sa, sb = cmp.steps(a, seed), cmp.steps(b, seed)
    # both curves are evaluated at the same steps, so the first hit settles it
    return sa is not None or sb is not None or step >= budget


def compare_agents(
    make_trainer,
    seeds,
    steps: int,
    agents: tuple[str, str] = ("segment", "global_baseline"),
    threshold: float = 0.7,
    stop_when_decided: bool = False,
    csv_path=None,
) -> Comparison:
    """Train both agent kinds per seed in lockstep, one eval interval at a time.

    ``make_trainer(agent_kind, seed)`` must build a fresh Trainer. With
    ``stop_when_decided`` a seed stops once its steps-to-threshold
    comparison can no longer change.
    """
    cmp = Comparison(tuple(agents), threshold)
    labels = cmp._labels()
    for seed in seeds:
        trainers = {label: make_trainer(kind, seed) for label, kind in zip(labels, agents)}
        for label, tr in trainers.items():
            cmp.curves[(label, seed)] = tr.evals
            actor = tr.agent.actor
            cmp.input_dims[(label, seed)] = getattr(actor, "input_dim", None)
        interval = next(iter(trainers.values())).eval.every or steps
        target = 0
        while True:
            for tr in trainers.values():
                tr.train_until(target)
            if target >= steps or (stop_when_decided and _decided(cmp, seed, steps, target)):
                break
            target = min(steps, target + interval)
    if csv_path is not None:
        cmp.write_csv(csv_path)
    return cmp


def default_trainer_factory(cfg):
    """``make_trainer`` for :func:`compare_agents` built from a RunConfig."""

    def make(kind: str, seed: int) -> Trainer:
        return Trainer(
            cfg.env_config(),
            cfg.arch_config(),
            cfg.sac_config(),
            seed,
            agent_kind=kind,
            kernel_size=cfg.perception.kernel_size,
            min_pixels=cfg.perception.min_pixels,
            eval=cfg.eval_settings(),
        )

    return make
