"""Schema-validated run configuration.

``parity="desk"`` gives the laptop-scale defaults; ``parity="paper"`` swaps
in the reference hyperparameters (wide 6-layer decoders, 512 px images,
closing/opening kernel 9, 20 envs with 5 updates per vector step). Explicit
section values always win over either preset.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .env import TASKS, EnvConfig
from .errors import ConfigError
from .learner import SacConfig
from .policy import AGENT_KINDS, ArchConfig
from .training import EvalSettings

RUN_DIR_ENV = "SEGRL_RUN_DIR"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class EnvSection(_Section):
    task: Literal[TASKS] = "reach"
    horizon: int = Field(50, ge=1)
    distractors_min: int = Field(2, ge=0)
    distractors_max: int = Field(2, ge=0)
    teleport_prob: float = Field(0.0, ge=0.0, le=1.0)
    include_background: bool = True
    image_size: int = Field(64, ge=1)
    patch_size: int = Field(8, ge=1)
    encoder_seed: int = 0
    segment_dim: int = Field(32, ge=1)


class PerceptionSection(_Section):
    kernel_size: int = Field(3, ge=1)
    min_pixels: int = Field(4, ge=1)


class ArchSection(_Section):
    model_dim: int = Field(32, ge=1)
    decoder_layers: int = Field(2, ge=1)
    decoder_heads: int = Field(2, ge=1)
    ffn_hidden: int = Field(128, ge=1)
    dropout: float = Field(0.0, ge=0.0, lt=1.0)
    proj_hidden_layers: int = Field(2, ge=1)
    proj_hidden_size: int = Field(128, ge=1)
    log_std_min: float = -10.0
    log_std_max: float = 2.0


class SacSection(_Section):
    gamma: float = Field(0.80, ge=0.0, le=1.0)
    tau: float = Field(0.01, gt=0.0, le=1.0)
    actor_lr: float = Field(3e-4, gt=0.0)
    critic_lr: float = Field(5e-4, gt=0.0)
    alpha_lr: float = Field(3e-4, gt=0.0)
    batch_size: int = Field(128, ge=1)
    actor_update_freq: int = Field(1, ge=1)
    critic_update_freq: int = Field(1, ge=1)
    target_update_freq: int = Field(2, ge=1)
    target_entropy: float | None = None
    num_envs: int = Field(4, ge=1)
    updates_per_step: int = Field(1, ge=0)
    warmup_steps: int = Field(1000, ge=0)
    buffer_capacity: int = Field(200_000, ge=1)


class EvalSection(_Section):
    every: int = Field(2000, ge=0)
    episodes: int = Field(10, ge=0)
    bootstrap_reps: int = Field(2000, ge=1)


PARITY_PRESET = {
    "env": {"image_size": 512, "patch_size": 16},
    "perception": {"kernel_size": 9, "min_pixels": 4},
    "arch": {
        "model_dim": 128,
        "decoder_layers": 6,
        "decoder_heads": 8,
        "ffn_hidden": 1024,
        "dropout": 0.0,
        "proj_hidden_layers": 4,
        "proj_hidden_size": 256,
        "log_std_min": -10.0,
        "log_std_max": 2.0,
    },
    "sac": {
        "gamma": 0.80,
        "tau": 0.01,
        "actor_lr": 3e-4,
        "critic_lr": 5e-4,
        "alpha_lr": 3e-4,
        "batch_size": 128,
        "actor_update_freq": 1,
        "critic_update_freq": 1,
        "target_update_freq": 2,
        "num_envs": 20,
        "updates_per_step": 5,
        "buffer_capacity": 1_000_000,
    },
    "eval": {"every": 10_000, "episodes": 10, "bootstrap_reps": 50_000},
}


class RunConfig(_Section):
    parity: Literal["desk", "paper"] = "desk"
    agent: Literal[AGENT_KINDS] = "segment"
    seed: int = 0
    steps: int = Field(60_000, ge=0)
    checkpoint_every: int = Field(10_000, ge=0)
    run_dir: str | None = None
    env: EnvSection = EnvSection()
    perception: PerceptionSection = PerceptionSection()
    arch: ArchSection = ArchSection()
    sac: SacSection = SacSection()
    eval: EvalSection = EvalSection()

    @model_validator(mode="before")
    @classmethod
    def _apply_parity(cls, data):
        if not isinstance(data, dict) or data.get("parity") != "paper":
            return data
        merged = dict(data)
        for section, preset in PARITY_PRESET.items():
            given = data.get(section) or {}
            if not isinstance(given, dict):
                return data
            merged[section] = {**preset, **given}
        return merged

    @model_validator(mode="after")
    def _cross_checks(self):
        # Building the runtime dataclasses runs their own validation too.
        try:
            self.env_config()
            self.arch_config()
            self.sac_config()
        except ConfigError as exc:
            raise ValueError(str(exc)) from exc
        return self

    def env_config(self) -> EnvConfig:
        return EnvConfig(**self.env.model_dump())

    def arch_config(self) -> ArchConfig:
        return ArchConfig(segment_dim=self.env.segment_dim, **self.arch.model_dump())

    def sac_config(self) -> SacConfig:
        return SacConfig(**self.sac.model_dump())

    def eval_settings(self) -> EvalSettings:
        return EvalSettings(**self.eval.model_dump())

    def snapshot(self) -> dict:
        return self.model_dump(mode="json")

    def model_hash(self) -> str:
        """Hash of everything that fixes the parameter layout and training dynamics."""
        relevant = self.snapshot()
        relevant.pop("run_dir", None)
        relevant.pop("steps", None)
        blob = json.dumps(relevant, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def resolve_run_dir(self, override: str | None = None) -> Path:
        chosen = override or self.run_dir or os.environ.get(RUN_DIR_ENV)
        if not chosen:
            raise ConfigError(f"no run directory: pass --run-dir, set run_dir, or set {RUN_DIR_ENV}")
        return Path(chosen)


def format_validation_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{where}: {err['msg']}")
    return "\n".join(lines)


def load_config(path=None, **overrides) -> RunConfig:
    """Read a JSON config (or start from defaults) and apply top-level overrides."""
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(format_validation_error(exc)) from exc
