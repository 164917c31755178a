"""``segrl`` command-line interface.

Exit codes: 0 success, 2 invalid configuration or usage, 3 training fault,
4 unusable checkpoint.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import filelock
import numpy as np

from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .config import RUN_DIR_ENV, RunConfig, load_config
from .errors import CheckpointError, ConfigError, TrainingFault
from .evaluation import EvalReport, evaluate, export_attention_rollout, iqm, robustness_suite, stratified_bootstrap_ci
from .evaluation.compare import CURVE_HEADER, compare_agents, default_trainer_factory
from .perception import Observer, Perturbation
from .training import Trainer

log = logging.getLogger("segrl")

EXIT_OK, EXIT_CONFIG, EXIT_FAULT, EXIT_CHECKPOINT = 0, 2, 3, 4
METRICS_SCHEMA = "segrl.metrics/1"
METRIC_FIELDS = (
    "step",
    "critic_loss",
    "actor_loss",
    "alpha_loss",
    "alpha",
    "q_mean",
    "q_std",
    "entropy",
    "buffer_size",
    "num_updates",
    "episode_return",
)
DEFAULT_SUITE = {
    "dropout": "segment_dropout:p=0.3",
    "spurious": "spurious_segments:k=8",
    "noise": "embedding_noise:sigma=0.1",
    "jitter": "bbox_jitter:eps=0.05",
    "speckle": "mask_speckle:flip_prob=0.02",
}


# -- run directory -------------------------------------------------------------


class RunDir:
    def __init__(self, root: Path):
        self.root = Path(root)
        self.config = self.root / "config.json"
        self.metrics = self.root / "metrics.jsonl"
        self.evals = self.root / "eval.csv"
        self.checkpoints = self.root / "checkpoints"
        self.lock = filelock.FileLock(str(self.root / ".lock"), timeout=0)

    def checkpoint_path(self, step: int) -> Path:
        return self.checkpoints / f"step_{step:09d}"

    def latest_checkpoint(self) -> Path | None:
        found = sorted(self.checkpoints.glob("step_*")) if self.checkpoints.exists() else []
        return found[-1] if found else None


def _open_log(path: Path, header, resume: bool, jsonl: bool):
    if resume and path.exists():
        return path.open("a", newline="")
    fh = path.open("w", newline="")
    if jsonl:
        fh.write(json.dumps({"schema": METRICS_SCHEMA, "fields": list(header)}) + "\n")
    else:
        csv.writer(fh).writerow(header)
    return fh


def _finite_or_none(value):
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def cmd_train(args) -> int:
    overrides = {"seed": args.seed, "steps": args.steps, "run_dir": args.run_dir}
    cfg = load_config(args.config, **overrides)
    run = RunDir(cfg.resolve_run_dir(args.run_dir))
    run.root.mkdir(parents=True, exist_ok=True)
    try:
        run.lock.acquire()
    except filelock.Timeout:
        raise ConfigError(f"{run.root} is locked by another process")
    try:
        return _train(cfg, run, args.resume)
    finally:
        run.lock.release()


def _make_trainer(cfg: RunConfig, agent=None, env_step: int = 0, **hooks) -> Trainer:
    return Trainer(
        cfg.env_config(),
        cfg.arch_config(),
        cfg.sac_config(),
        cfg.seed,
        agent_kind=cfg.agent,
        kernel_size=cfg.perception.kernel_size,
        min_pixels=cfg.perception.min_pixels,
        eval=cfg.eval_settings(),
        agent=agent,
        env_step=env_step,
        **hooks,
    )


def _train(cfg: RunConfig, run: RunDir, resume: bool) -> int:
    agent, start, num_updates = None, 0, 0
    latest = run.latest_checkpoint() if resume else None
    if latest is not None:
        manifest = read_manifest(latest)
        if manifest["config_hash"] != cfg.model_hash():
            raise CheckpointError(f"{latest}: written under a different configuration")
        agent, manifest = load_checkpoint(latest, cfg.arch_config(), cfg.agent)
        start = manifest["step"]
        num_updates = manifest["extra"].get("num_updates", 0)
        log.info("resuming from %s at step %d", latest, start)
    resuming = latest is not None
    run.config.write_text(json.dumps(cfg.snapshot(), indent=1))

    metrics_fh = _open_log(run.metrics, METRIC_FIELDS, resuming, jsonl=True)
    eval_fh = _open_log(run.evals, CURVE_HEADER, resuming, jsonl=False)
    eval_writer = csv.writer(eval_fh)

    def on_metrics(record):
        metrics_fh.write(json.dumps({k: _finite_or_none(v) for k, v in record.items()}) + "\n")

    def on_eval(point):
        eval_writer.writerow((cfg.agent, cfg.seed, point.env_step, point.iqm, point.ci_low, point.ci_high))
        eval_fh.flush()
        log.info("step %d  eval iqm %.3f [%.3f, %.3f]", point.env_step, point.iqm, point.ci_low, point.ci_high)

    trainer = _make_trainer(cfg, agent, start, on_metrics=on_metrics, on_eval=on_eval)
    trainer.learner.num_updates = num_updates
    trainer.learner.num_soft_updates = num_updates // cfg.sac.target_update_freq

    def checkpoint():
        extra = {"num_updates": trainer.learner.num_updates, "config": cfg.snapshot()}
        save_checkpoint(trainer.agent, run.checkpoint_path(trainer.env_step), trainer.env_step, cfg.model_hash(), extra)
        metrics_fh.flush()

    try:
        if not resuming:
            checkpoint()
        every = cfg.checkpoint_every or cfg.steps
        while trainer.env_step < cfg.steps:
            boundary = (trainer.env_step // every + 1) * every if every else cfg.steps
            trainer.train_until(min(cfg.steps, boundary))
            checkpoint()
    except TrainingFault as exc:
        log.error("training fault at step %d: %s", trainer.env_step, exc)
        return EXIT_FAULT
    finally:
        metrics_fh.close()
        eval_fh.close()
    return EXIT_OK


# -- evaluation commands ----------------------------------------------------------


def _load_for_eval(args):
    agent, manifest = load_checkpoint(args.checkpoint)
    snapshot = manifest.get("extra", {}).get("config")
    cfg = RunConfig.model_validate(snapshot) if snapshot else RunConfig(agent=manifest["agent_kind"])
    env_cfg = cfg.env_config()
    changes = {}
    if getattr(args, "task", None):
        changes["task"] = args.task
    if getattr(args, "distractors", None) is not None:
        changes["distractors_min"] = changes["distractors_max"] = args.distractors
    if getattr(args, "teleport_prob", None) is not None:
        changes["teleport_prob"] = args.teleport_prob
    if changes:
        env_cfg = replace(env_cfg, **changes)
    mode = "segment" if agent.kind == "segment" else "global"
    observer = Observer(env_cfg, cfg.perception.kernel_size, cfg.perception.min_pixels, mode)
    return agent, manifest, cfg, observer


def _emit(payload: dict, out: Path) -> None:
    text = json.dumps(payload, indent=1)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    print(text)


def cmd_eval(args) -> int:
    agent, manifest, cfg, observer = _load_for_eval(args)
    returns = evaluate(agent, observer, args.episodes, args.seed)
    if returns:
        report = EvalReport.from_scores([returns], reps=args.reps, seed=args.seed)
    else:
        report = EvalReport([[]], float("nan"), float("nan"), float("nan"))
    report.metadata.update(
        config_hash=manifest["config_hash"], step=manifest["step"], seed=args.seed, episodes=args.episodes,
        perturbation="none",
    )
    _emit(report.to_dict(), Path(args.out or Path(args.checkpoint) / "eval_report.json"))
    return EXIT_OK


def _parse_suite(specs, seed: int) -> dict:
    suite = {}
    for item in specs or [f"{k}={v}" for k, v in DEFAULT_SUITE.items()]:
        name, sep, text = item.partition("=")
        if not sep or not text:
            raise ConfigError(f"perturbation entry {item!r} must look like name=kind:key=value")
        suite[name] = [Perturbation.parse(part, seed) for part in text.split("+")]
    return suite


def cmd_perturb(args) -> int:
    agent, manifest, cfg, observer = _load_for_eval(args)
    suite = _parse_suite(args.perturb, args.seed)
    reports = robustness_suite(agent, observer, suite, args.episodes, args.seed, reps=args.reps)
    payload = {
        "config_hash": manifest["config_hash"],
        "step": manifest["step"],
        "seed": args.seed,
        "reports": {name: r.to_dict() for name, r in reports.items()},
    }
    _emit(payload, Path(args.out or Path(args.checkpoint) / "perturb_report.json"))
    return EXIT_OK


def cmd_attn(args) -> int:
    agent, _, _, observer = _load_for_eval(args)
    perts = [Perturbation.parse(p, args.seed) for p in args.perturb or []]
    if agent.kind != "segment":
        raise ConfigError("attention traces need a segment agent")
    trace = export_attention_rollout(agent, observer, args.seed, args.out, args.network, perts)
    print(f"wrote {len(trace['records'])} steps to {args.out}")
    return EXIT_OK


def read_scores(path) -> list[list[float]]:
    """Task x seed matrix from a CSV.

    Either a ``task,seed,score`` table (any column order, extra columns
    ignored) or a bare numeric matrix with one task per row.
    """
    with Path(path).open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ConfigError(f"{path}: no scores")
    header = [c.strip() for c in rows[0]]
    try:
        if "score" in header:
            col = header.index("score")
            task_col = header.index("task") if "task" in header else None
            strata: dict = {}
            for r in rows[1:]:
                strata.setdefault(r[task_col] if task_col is not None else "", []).append(float(r[col]))
            return list(strata.values())
        return [[float(c) for c in r if c.strip()] for r in rows]
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"{path}: malformed scores ({exc})") from exc


def cmd_stats(args) -> int:
    scores = read_scores(args.scores)
    point = iqm(np.concatenate(scores))
    low, high = stratified_bootstrap_ci(scores, args.reps, args.confidence, args.seed)
    n = sum(map(len, scores))
    print(f"iqm={point!r} ci_low={low!r} ci_high={high!r} n={n} tasks={len(scores)} reps={args.reps}")
    out = Path(args.out) if args.out else Path(str(args.scores) + ".stats.json")
    out.write_text(
        json.dumps(
            {"iqm": point, "ci_low": low, "ci_high": high, "n": n, "tasks": len(scores), "reps": args.reps,
             "confidence": args.confidence, "seed": args.seed, "small_n": n < 4}
        )
    )
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_config(args.config, steps=args.steps)
    seeds = range(args.seed, args.seed + args.seeds)
    cmp = compare_agents(
        default_trainer_factory(cfg),
        seeds,
        cfg.steps,
        threshold=args.threshold,
        stop_when_decided=args.stop_when_decided,
        csv_path=args.out,
    )
    a, b = cmp._labels()
    for seed in seeds:
        print(f"seed {seed}: {a} {cmp.steps(a, seed)}  {b} {cmp.steps(b, seed)}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segrl", description="Segment-token SAC on 2D toy tasks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one agent")
    p.add_argument("config", nargs="?", help="JSON config (defaults if omitted)")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--run-dir", help=f"defaults to config run_dir, then ${RUN_DIR_ENV}")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    p.set_defaults(func=cmd_train)

    def checkpoint_cmd(name, func, help_text):
        q = sub.add_parser(name, help=help_text)
        q.add_argument("checkpoint")
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--task")
        q.add_argument("--distractors", type=int)
        q.add_argument("--teleport-prob", type=float)
        q.set_defaults(func=func)
        return q

    q = checkpoint_cmd("eval", cmd_eval, "evaluate a checkpoint")
    q.add_argument("--episodes", type=int, default=10)
    q.add_argument("--reps", type=int, default=50_000)
    q.add_argument("--out")

    q = checkpoint_cmd("perturb", cmd_perturb, "run a perturbation suite")
    q.add_argument("--perturb", action="append", metavar="NAME=KIND:K=V[+KIND...]")
    q.add_argument("--episodes", type=int, default=10)
    q.add_argument("--reps", type=int, default=50_000)
    q.add_argument("--out")

    q = checkpoint_cmd("attn", cmd_attn, "export an attention trace")
    q.add_argument("--out", required=True)
    q.add_argument("--network", choices=("critic", "actor"), default="critic")
    q.add_argument("--perturb", action="append", metavar="KIND:K=V")

    q = sub.add_parser("stats", help="IQM and stratified-bootstrap CI of a scores file")
    q.add_argument("scores")
    q.add_argument("--reps", type=int, default=50_000)
    q.add_argument("--confidence", type=float, default=0.95)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out")
    q.set_defaults(func=cmd_stats)

    q = sub.add_parser("compare", help="segment agent vs global baseline on matched seeds")
    q.add_argument("config", nargs="?")
    q.add_argument("--steps", type=int)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--seeds", type=int, default=5)
    q.add_argument("--threshold", type=float, default=0.7)
    q.add_argument("--stop-when-decided", action="store_true")
    q.add_argument("--out", default="curves.csv")
    q.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except TrainingFault as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
