"""Mask post-processing, segment-embedding pooling and observation perturbations."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .env import EnvConfig, InstanceMasks, PatchEncoder, SceneState, patch_embed, rasterize
from .errors import ConfigError, ContractViolation

FALLBACK_LABEL = "fallback"
FULL_BOX = (0.0, 0.0, 1.0, 1.0)


@dataclass
class SegmentObservation:
    embeddings: np.ndarray  # (N, S) float32
    bboxes: np.ndarray  # (N, 4) float32, (x_min, y_min, x_max, y_max)
    labels: list[str]
    proprio: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float32))

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def num_segments(self) -> int:
        return self.embeddings.shape[0]

    def validate(self) -> None:
        if self.num_segments < 1:
            raise ContractViolation("observation must hold at least one segment")
        b = self.bboxes
        ok = (b[:, 0] >= 0) & (b[:, 1] >= 0) & (b[:, 2] <= 1) & (b[:, 3] <= 1)
        ok &= (b[:, 0] < b[:, 2]) & (b[:, 1] < b[:, 3])
        if not ok.all():
            raise ContractViolation("invalid bounding box in observation")
        if not np.all(np.isfinite(self.embeddings)):
            raise ContractViolation("non-finite segment embedding")


def fallback_observation(segment_dim: int, proprio=None) -> SegmentObservation:
    return SegmentObservation(
        embeddings=np.zeros((1, segment_dim), dtype=np.float32),
        bboxes=np.array([FULL_BOX], dtype=np.float32),
        labels=[FALLBACK_LABEL],
        proprio=np.zeros(0, dtype=np.float32) if proprio is None else proprio,
    )


# -- morphology -------------------------------------------------------------


def _same_padding(kernel_size: int, stride: int = 1, dilation: int = 1) -> tuple[int, int]:
    total = max(0, (kernel_size - 1) * dilation - stride + 1)
    before = total // 2
    return before, total - before


def _max_pool_same(x: np.ndarray, kernel_size: int) -> np.ndarray:
    """Stride-1 max-pool that keeps spatial size; zero padding on both axes.

    The square window is separable, so it is applied as a row pass then a
    column pass over the trailing two axes.
    """
    before, after = _same_padding(kernel_size)
    h, w = x.shape[-2:]
    pad = [(0, 0)] * (x.ndim - 2) + [(before, after), (before, after)]
    padded = np.pad(x, pad)
    rows = padded[..., 0:h, :]
    for off in range(1, kernel_size):
        rows = np.maximum(rows, padded[..., off : off + h, :])
    out = rows[..., :, 0:w]
    for off in range(1, kernel_size):
        out = np.maximum(out, rows[..., :, off : off + w])
    return out


def _erode(x: np.ndarray, kernel_size: int) -> np.ndarray:
    return -_max_pool_same(-x, kernel_size)


def _dilate(x: np.ndarray, kernel_size: int) -> np.ndarray:
    return _max_pool_same(x, kernel_size)


def post_process_masks(masks, kernel_size: int = 9) -> np.ndarray:
    """Morphological opening followed by closing, independently per mask.

    ``masks`` is (N, 1, H, W) and {0, 1}-valued. Padding is zero, so pixels
    outside the image count as background for erosion and dilation alike.
    """
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigError(f"kernel_size must be a positive odd integer, got {kernel_size}")
    arr = np.asarray(masks)
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise ContractViolation(f"masks must be (N, 1, H, W), got {arr.shape}")
    x = arr.astype(np.int8)
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ContractViolation("masks must be {0, 1}-valued")
    opened = _dilate(_erode(x, kernel_size), kernel_size)
    closed = _erode(_dilate(opened, kernel_size), kernel_size)
    return closed.astype(np.uint8)


# -- pooling ----------------------------------------------------------------


def count_mask_pixels_per_patch(mask, patch_size: int) -> np.ndarray:
    """Number of foreground pixels inside each non-overlapping patch."""
    m = np.asarray(mask)
    if m.ndim == 3:
        m = m[0]
    h, w = m.shape
    if h % patch_size or w % patch_size:
        raise ConfigError(f"mask {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    return m.reshape(gh, patch_size, gw, patch_size).astype(np.int64).sum(axis=(1, 3))


def mask_bbox(mask) -> np.ndarray:
    """Normalised box with an exclusive upper edge: a single pixel is non-degenerate."""
    m = np.asarray(mask)
    if m.ndim == 3:
        m = m[0]
    ys, xs = np.nonzero(m)
    if xs.size == 0:
        raise ContractViolation("mask_bbox called on an empty mask")
    h, w = m.shape
    return np.array(
        [xs.min() / w, ys.min() / h, (xs.max() + 1) / w, (ys.max() + 1) / h],
        dtype=np.float32,
    )


def global_encode(patches: np.ndarray) -> np.ndarray:
    """Mean over every patch embedding of the grid."""
    gh, gw, s = patches.shape
    if gh * gw == 0:
        raise ContractViolation("empty patch grid")
    return patches.reshape(gh * gw, s).astype(np.float64).mean(axis=0).astype(patches.dtype)


def extract_segment_embeddings(
    masks: InstanceMasks, patches: np.ndarray, min_pixels: int = 4, proprio=None
) -> SegmentObservation:
    """Average-pool the patch embeddings that each mask sufficiently overlaps.

    Patches with fewer than ``min_pixels`` mask pixels are ignored. A mask
    left with no patch is dropped; if nothing survives a single fallback
    segment (zero embedding, full box) is emitted instead.
    """
    if min_pixels < 1:
        raise ConfigError("min_pixels must be >= 1")
    gh, gw, s = patches.shape
    arr = np.asarray(masks.masks)
    n, _, h, w = arr.shape if arr.ndim == 4 else (0, 1, gh, gw)
    proprio = np.zeros(0, dtype=np.float32) if proprio is None else np.asarray(proprio, dtype=np.float32)
    if n == 0:
        return fallback_observation(s, proprio)
    if h % gh or w % gw or h // gh != w // gw:
        raise ContractViolation(f"mask size {h}x{w} inconsistent with patch grid {gh}x{gw}")
    p = h // gh
    counts = arr[:, 0].reshape(n, gh, p, gw, p).astype(np.int64).sum(axis=(2, 4))
    keep = counts >= min_pixels
    kept = keep.reshape(n, -1).sum(axis=1)
    alive = np.nonzero(kept > 0)[0]
    if alive.size == 0:
        return fallback_observation(s, proprio)
    weights = keep[alive].reshape(alive.size, -1).astype(np.float64)
    flat = patches.reshape(gh * gw, s).astype(np.float64)
    emb = (weights @ flat) / kept[alive, None]
    boxes = np.stack([mask_bbox(arr[i]) for i in alive])
    return SegmentObservation(
        embeddings=emb.astype(np.float32),
        bboxes=boxes.astype(np.float32),
        labels=[masks.labels[i] for i in alive],
        proprio=proprio,
    )


# -- perturbations ----------------------------------------------------------

PERTURBATION_KINDS = (
    "none",
    "segment_dropout",
    "spurious_segments",
    "embedding_noise",
    "bbox_jitter",
    "mask_speckle",
)
MASK_KINDS = ("mask_speckle",)
SPURIOUS_LABEL = "spurious"
_MIN_BOX_SIDE = 1e-3


@dataclass(frozen=True)
class Perturbation:
    kind: str = "none"
    p: float = 0.0
    k: int = 0
    noise_scale: float = 1.0
    sigma: float = 0.0
    eps: float = 0.0
    flip_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ConfigError(f"unknown perturbation kind {self.kind!r}")
        if not 0.0 <= self.p < 1.0:
            raise ConfigError("segment_dropout p must lie in [0, 1)")
        if self.k < 0:
            raise ConfigError("spurious_segments k must be >= 0")
        if min(self.noise_scale, self.sigma, self.eps, self.flip_prob) < 0:
            raise ConfigError("perturbation scales must be non-negative")
        if self.flip_prob > 1.0:
            raise ConfigError("flip_prob must be <= 1")

    @property
    def acts_on_masks(self) -> bool:
        return self.kind in MASK_KINDS

    def describe(self) -> str:
        params = {
            "segment_dropout": f"p={self.p}",
            "spurious_segments": f"k={self.k},noise_scale={self.noise_scale}",
            "embedding_noise": f"sigma={self.sigma}",
            "bbox_jitter": f"eps={self.eps}",
            "mask_speckle": f"flip_prob={self.flip_prob}",
        }.get(self.kind, "")
        return f"{self.kind}({params})" if params else self.kind

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> Perturbation:
        """Parse ``kind`` or ``kind:key=value,key=value`` (as used by the CLI)."""
        kind, _, rest = text.strip().partition(":")
        kwargs: dict = {}
        for item in filter(None, rest.split(",")):
            key, _, value = item.partition("=")
            key = key.strip()
            if key not in {"p", "k", "noise_scale", "sigma", "eps", "flip_prob", "seed"}:
                raise ConfigError(f"unknown perturbation parameter {key!r}")
            kwargs[key] = int(value) if key in ("k", "seed") else float(value)
        kwargs.setdefault("seed", seed)
        return cls(kind=kind.strip(), **kwargs)


def _random_boxes(rng: np.random.Generator, k: int) -> np.ndarray:
    xs = np.sort(rng.uniform(0.0, 1.0, size=(k, 2)), axis=1)
    ys = np.sort(rng.uniform(0.0, 1.0, size=(k, 2)), axis=1)
    boxes = np.stack([xs[:, 0], ys[:, 0], xs[:, 1], ys[:, 1]], axis=1)
    return _repair_boxes(boxes)


def _repair_boxes(boxes: np.ndarray) -> np.ndarray:
    b = np.clip(boxes, 0.0, 1.0)
    x0, x1 = np.minimum(b[:, 0], b[:, 2]), np.maximum(b[:, 0], b[:, 2])
    y0, y1 = np.minimum(b[:, 1], b[:, 3]), np.maximum(b[:, 1], b[:, 3])
    for lo, hi in ((x0, x1), (y0, y1)):
        thin = hi - lo < _MIN_BOX_SIDE
        grow_up = thin & (lo <= 1.0 - _MIN_BOX_SIDE)
        hi[grow_up] = lo[grow_up] + _MIN_BOX_SIDE
        shrink = thin & ~grow_up
        lo[shrink] = hi[shrink] - _MIN_BOX_SIDE
    return np.stack([x0, y0, x1, y1], axis=1).astype(np.float32)


def perturb_observation(target, perturbation: Perturbation, rng: np.random.Generator | None = None):
    """Apply ``perturbation`` to a SegmentObservation or to InstanceMasks.

    Mask-level kinds only touch InstanceMasks and segment-level kinds only
    touch SegmentObservations; anything else passes through unchanged, so
    one perturbation list can be applied at both pipeline stages.
    """
    if rng is None:
        rng = np.random.default_rng(perturbation.seed)
    kind = perturbation.kind
    if isinstance(target, InstanceMasks):
        if kind != "mask_speckle" or perturbation.flip_prob == 0.0:
            return target
        flips = rng.random(target.masks.shape) < perturbation.flip_prob
        masks = np.where(flips, 1 - target.masks, target.masks).astype(np.uint8)
        return InstanceMasks(masks, list(target.labels), provenance="perturbed")
    if not isinstance(target, SegmentObservation):
        raise ContractViolation(f"cannot perturb {type(target).__name__}")
    obs = target

    if kind == "segment_dropout":
        if perturbation.p == 0.0:
            return obs
        drop = rng.random(obs.num_segments) < perturbation.p
        drop &= np.array([lab != FALLBACK_LABEL for lab in obs.labels])
        keep = np.nonzero(~drop)[0]
        if keep.size == 0:
            return fallback_observation(obs.embeddings.shape[1], obs.proprio)
        return replace(
            obs,
            embeddings=obs.embeddings[keep],
            bboxes=obs.bboxes[keep],
            labels=[obs.labels[i] for i in keep],
        )
    if kind == "spurious_segments":
        k = perturbation.k
        if k == 0:
            return obs
        s = obs.embeddings.shape[1]
        noise = rng.normal(0.0, perturbation.noise_scale, size=(k, s)).astype(np.float32)
        return replace(
            obs,
            embeddings=np.concatenate([obs.embeddings, noise]),
            bboxes=np.concatenate([obs.bboxes, _random_boxes(rng, k)]),
            labels=list(obs.labels) + [SPURIOUS_LABEL] * k,
        )
    if kind == "embedding_noise":
        if perturbation.sigma == 0.0:
            return obs
        noise = rng.normal(0.0, perturbation.sigma, size=obs.embeddings.shape)
        return replace(obs, embeddings=(obs.embeddings + noise).astype(np.float32))
    if kind == "bbox_jitter":
        if perturbation.eps == 0.0:
            return obs
        jitter = rng.uniform(-perturbation.eps, perturbation.eps, size=obs.bboxes.shape)
        return replace(obs, bboxes=_repair_boxes(obs.bboxes + jitter))
    return obs


# -- full observation pipeline ----------------------------------------------


@dataclass
class Observer:
    """Turns a scene state into the policy input (segment or global mode)."""

    env_cfg: EnvConfig
    kernel_size: int = 3
    min_pixels: int = 4
    mode: str = "segment"
    encoder: PatchEncoder | None = None

    def __post_init__(self):
        if self.mode not in ("segment", "global"):
            raise ConfigError(f"unknown observation mode {self.mode!r}")
        if self.encoder is None:
            self.encoder = PatchEncoder.from_config(self.env_cfg)

    def __call__(self, state: SceneState, perturbations=(), rng: np.random.Generator | None = None):
        image, masks = rasterize(state, self.env_cfg)
        patches = patch_embed(image, self.encoder)
        proprio = state.effector_pos.astype(np.float32)
        if rng is None and perturbations:
            rng = np.random.default_rng(perturbations[0].seed)

        if self.mode == "global":
            obs = SegmentObservation(
                embeddings=global_encode(patches)[None].astype(np.float32),
                bboxes=np.array([FULL_BOX], dtype=np.float32),
                labels=["global"],
                proprio=proprio,
            )
            for pert in perturbations:
                if pert.kind == "embedding_noise":
                    obs = perturb_observation(obs, pert, rng)
            return obs

        for pert in perturbations:
            masks = perturb_observation(masks, pert, rng)
        masks = InstanceMasks(post_process_masks(masks.masks, self.kernel_size), masks.labels, masks.provenance)
        obs = extract_segment_embeddings(masks, patches, self.min_pixels, proprio)
        for pert in perturbations:
            obs = perturb_observation(obs, pert, rng)
        return obs
