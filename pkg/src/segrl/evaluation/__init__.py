"""Evaluation rollouts and aggregate statistics.

``compare_agents`` lives in :mod:`segrl.evaluation.compare` because it
drives full training runs.
"""

from .rollout import ATTENTION_SCHEMA, evaluate, export_attention_rollout, robustness_suite
from .stats import (
    DEFAULT_BOOTSTRAP_REPS,
    EvalReport,
    iqm,
    stratified_bootstrap_ci,
    stratified_resample,
)

__all__ = [
    "ATTENTION_SCHEMA",
    "DEFAULT_BOOTSTRAP_REPS",
    "EvalReport",
    "evaluate",
    "export_attention_rollout",
    "iqm",
    "robustness_suite",
    "stratified_bootstrap_ci",
    "stratified_resample",
]
