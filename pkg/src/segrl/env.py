"""Deterministic 2D reach/push tasks and the oracle renderer.

The renderer produces what a frozen grounded-segmentation stack would hand to
the agent: per-entity binary masks, a feature image and, through
:func:`patch_embed`, a grid of patch embeddings from a fixed random encoder.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation

TASKS = ("reach", "push")

# Class channels of the feature image, followed by an x-ramp and a y-ramp.
CLASS_CHANNELS = ("effector", "target", "object", "distractor")
NUM_CHANNELS = len(CLASS_CHANNELS) + 2

STEP_SIZE = 0.05
MIN_SEPARATION = 0.1
# Radii in pixels at a 64x64 image; scaled linearly for other sizes.
RADIUS_PX = {"effector": 4.0, "object": 5.0, "target": 6.0, "distractor": 3.0}
# Painted later = drawn on top.
PAINT_ORDER = ("target", "distractor", "object", "effector")


@dataclass(frozen=True)
class EnvConfig:
    task: str = "reach"
    horizon: int = 50
    distractors_min: int = 0
    distractors_max: int = 0
    teleport_prob: float = 0.0
    include_background: bool = True
    image_size: int = 64
    patch_size: int = 8
    encoder_seed: int = 0
    segment_dim: int = 32

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if not 0 <= self.distractors_min <= self.distractors_max:
            raise ConfigError("need 0 <= distractors_min <= distractors_max")
        if not 0.0 <= self.teleport_prob <= 1.0:
            raise ConfigError("teleport_prob must lie in [0, 1]")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")


@dataclass
class SceneState:
    effector_pos: np.ndarray
    target_pos: np.ndarray
    object_pos: np.ndarray | None = None
    distractors: list[tuple[np.ndarray, int]] = field(default_factory=list)
    step_index: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng, repr=False)

    def copy(self) -> SceneState:
        rng = np.random.Generator(type(self.rng.bit_generator)())
        rng.bit_generator.state = self.rng.bit_generator.state
        return SceneState(
            self.effector_pos.copy(),
            self.target_pos.copy(),
            None if self.object_pos is None else self.object_pos.copy(),
            [(pos.copy(), shape) for pos, shape in self.distractors],
            self.step_index,
            rng,
        )


@dataclass
class FeatureImage:
    channels: np.ndarray  # (C, H, W) float32

    @property
    def height(self) -> int:
        return self.channels.shape[1]

    @property
    def width(self) -> int:
        return self.channels.shape[2]


@dataclass
class InstanceMasks:
    masks: np.ndarray  # (N, 1, H, W) uint8
    labels: list[str]
    provenance: str = "oracle"

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class PatchEncoder:
    """Frozen linear patch encoder: one fixed matrix of shape (S, C*p*p)."""

    projection: np.ndarray
    patch_size: int
    seed: int

    @classmethod
    def create(cls, segment_dim: int, patch_size: int, seed: int, channels: int = NUM_CHANNELS):
        fan_in = channels * patch_size * patch_size
        bound = 1.0 / np.sqrt(fan_in)
        rng = np.random.default_rng(seed)
        proj = rng.uniform(-bound, bound, size=(segment_dim, fan_in)).astype(np.float32)
        proj.flags.writeable = False
        return cls(projection=proj, patch_size=patch_size, seed=seed)

    @classmethod
    def from_config(cls, cfg: EnvConfig) -> PatchEncoder:
        return cls.create(cfg.segment_dim, cfg.patch_size, cfg.encoder_seed)

    @property
    def segment_dim(self) -> int:
        return self.projection.shape[0]


def _sample_separated(rng: np.random.Generator, count: int) -> list[np.ndarray]:
    points: list[np.ndarray] = []
    while len(points) < count:
        p = rng.uniform(0.0, 1.0, size=2)
        if all(np.linalg.norm(p - q) >= MIN_SEPARATION for q in points):
            points.append(p)
    return points


class ToyEnv:
    """Functional environment: ``reset`` builds a state, ``step`` returns a new one."""

    action_dim = 2

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg

    def reset(self, seed: int) -> SceneState:
        rng = np.random.default_rng(seed)
        cfg = self.cfg
        n_distractors = int(rng.integers(cfg.distractors_min, cfg.distractors_max + 1))
        n_core = 3 if cfg.task == "push" else 2
        points = _sample_separated(rng, n_core + n_distractors)
        effector, target = points[0], points[1]
        obj = points[2] if cfg.task == "push" else None
        shapes = rng.integers(0, 2, size=n_distractors)
        distractors = [(points[n_core + i], int(shapes[i])) for i in range(n_distractors)]
        return SceneState(
            effector_pos=effector,
            target_pos=target,
            object_pos=obj,
            distractors=distractors,
            step_index=0,
            rng=rng,
        )

    def step(self, state: SceneState, action) -> tuple[SceneState, float, bool]:
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (self.action_dim,):
            raise ContractViolation(f"action must have shape ({self.action_dim},), got {action.shape}")
        if not np.all(np.isfinite(action)) or np.any(np.abs(action) > 1.0 + 1e-6):
            raise ContractViolation(f"action outside [-1, 1]: {action}")
        if state.step_index >= self.cfg.horizon:
            raise ContractViolation("episode already finished")
        action = np.clip(action, -1.0, 1.0)

        nxt = state.copy()
        old_eff = nxt.effector_pos
        nxt.effector_pos = np.clip(old_eff + STEP_SIZE * action, 0.0, 1.0)
        if self.cfg.task == "push":
            contact = (RADIUS_PX["effector"] + RADIUS_PX["object"]) / 64.0
            if np.linalg.norm(nxt.effector_pos - nxt.object_pos) < contact:
                delta = nxt.effector_pos - old_eff
                nxt.object_pos = np.clip(nxt.object_pos + delta, 0.0, 1.0)
        if self.cfg.teleport_prob > 0.0:
            moved = []
            for pos, shape in nxt.distractors:
                if nxt.rng.random() < self.cfg.teleport_prob:
                    pos = nxt.rng.uniform(0.0, 1.0, size=2)
                moved.append((pos, shape))
            nxt.distractors = moved

        nxt.step_index += 1
        done = nxt.step_index == self.cfg.horizon
        return nxt, self.reward(nxt), done

    def reward(self, state: SceneState) -> float:
        sqrt2 = np.sqrt(2.0)
        if self.cfg.task == "reach":
            return float(1.0 - np.linalg.norm(state.effector_pos - state.target_pos) / sqrt2)
        to_obj = np.linalg.norm(state.effector_pos - state.object_pos) / sqrt2
        to_goal = np.linalg.norm(state.object_pos - state.target_pos) / sqrt2
        return float(0.5 * (1.0 - to_obj) + 0.5 * (1.0 - to_goal))


def _entities(state: SceneState) -> list[tuple[str, np.ndarray, int]]:
    """(label, position, shape_id) in paint order, back to front."""
    out = [("target", state.target_pos, 0)]
    out += [("distractor", pos, shape) for pos, shape in state.distractors]
    if state.object_pos is not None:
        out.append(("object", state.object_pos, 0))
    out.append(("effector", state.effector_pos, 0))
    return out


def rasterize(state: SceneState, cfg: EnvConfig) -> tuple[FeatureImage, InstanceMasks]:
    """Paint every entity with z-ordering and return the feature image and masks.

    Entities with no visible pixel are left out, so the mask count varies with
    occlusion. With ``include_background`` a complement mask is appended.
    """
    size = cfg.image_size
    scale = size / 64.0
    centers = (np.arange(size) + 0.5)
    cols = centers[None, :]
    rows = centers[:, None]

    owner = np.full((size, size), -1, dtype=np.int64)
    entities = _entities(state)
    for idx, (label, pos, _shape) in enumerate(entities):
        r = RADIUS_PX[label] * scale
        cx, cy = pos[0] * size, pos[1] * size
        inside = (cols - cx) ** 2 + (rows - cy) ** 2 <= r * r
        owner[inside] = idx

    channels = np.zeros((NUM_CHANNELS, size, size), dtype=np.float32)
    ramp = np.linspace(0.0, 1.0, size, dtype=np.float32)
    channels[-2] = ramp[None, :]
    channels[-1] = ramp[:, None]

    masks, labels = [], []
    # Front-most first in the output; the order carries no meaning downstream.
    for idx in range(len(entities) - 1, -1, -1):
        label = entities[idx][0]
        m = owner == idx
        if not m.any():
            continue
        channels[CLASS_CHANNELS.index(label)][m] = 1.0
        masks.append(m)
        labels.append(label)
    if cfg.include_background:
        bg = owner < 0
        if bg.any():
            masks.append(bg)
            labels.append("background")

    if masks:
        arr = np.stack(masks)[:, None].astype(np.uint8)
    else:
        arr = np.zeros((0, 1, size, size), dtype=np.uint8)
    return FeatureImage(channels), InstanceMasks(arr, labels)


def patch_embed(image: FeatureImage, encoder: PatchEncoder) -> np.ndarray:
    """Project each non-overlapping patch (flattened channel-major) to an S-vector.

    Returns an array of shape (Gh, Gw, S).
    """
    c, h, w = image.channels.shape
    p = encoder.patch_size
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
    if encoder.projection.shape[1] != c * p * p:
        raise ConfigError("encoder projection does not match image channels")
    gh, gw = h // p, w // p
    blocks = image.channels.reshape(c, gh, p, gw, p).transpose(1, 3, 0, 2, 4)
    flat = blocks.reshape(gh, gw, c * p * p)
    return flat @ encoder.projection.T
