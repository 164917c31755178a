"""Interquartile mean and stratified-bootstrap confidence intervals."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ContractViolation

DEFAULT_BOOTSTRAP_REPS = 50_000


def _trimmed_mean_rows(sorted_rows: np.ndarray) -> np.ndarray:
    """IQM of every row of an already row-sorted 2D array."""
    n = sorted_rows.shape[1]
    cut = n // 4
    kept = sorted_rows[:, cut : n - cut]
    # Shifting by the first kept value makes constant rows come out exact.
    shift = kept[:, :1]
    return shift[:, 0] + (kept - shift).mean(axis=1)


def iqm(values) -> float:
    """Mean of the values left after dropping floor(n/4) from each end."""
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise ContractViolation("iqm of an empty list")
    return float(_trimmed_mean_rows(np.sort(x)[None, :])[0])


def _strata(scores) -> list[np.ndarray]:
    rows = [np.asarray(r, dtype=np.float64).ravel() for r in scores]
    if not rows:
        raise ContractViolation("no strata given")
    for i, r in enumerate(rows):
        if r.size == 0:
            raise ContractViolation(f"stratum {i} is empty")
    return rows


def stratified_resample(scores, reps: int, rng: np.random.Generator) -> np.ndarray:
    """(reps, total) matrix; columns of stratum j only ever hold stratum j's values.

    Strata occupy consecutive column blocks in input order.
    """
    blocks = []
    for row in _strata(scores):
        idx = rng.integers(0, row.size, size=(reps, row.size))
        blocks.append(row[idx])
    return np.concatenate(blocks, axis=1)


def stratified_bootstrap_ci(
    scores, reps: int = DEFAULT_BOOTSTRAP_REPS, confidence: float = 0.95, seed: int = 0
) -> tuple[float, float]:
    """Percentile interval of the IQM under resampling within each task row."""
    if reps < 1:
        raise ContractViolation("reps must be >= 1")
    if not 0.0 < confidence < 1.0:
        raise ContractViolation("confidence must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    stats = np.empty(reps)
    chunk = max(1, 2_000_000 // sum(r.size for r in _strata(scores)))
    for lo in range(0, reps, chunk):
        hi = min(reps, lo + chunk)
        sample = stratified_resample(scores, hi - lo, rng)
        stats[lo:hi] = _trimmed_mean_rows(np.sort(sample, axis=1))
    tail = 100.0 * (1.0 - confidence) / 2.0
    low, high = np.percentile(stats, [tail, 100.0 - tail])
    return float(low), float(high)


@dataclass
class EvalReport:
    scores: list[list[float]]
    iqm: float
    ci_low: float
    ci_high: float
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_scores(cls, scores, reps: int = DEFAULT_BOOTSTRAP_REPS, confidence: float = 0.95, seed: int = 0, **metadata):
        rows = [list(map(float, r)) for r in _strata(scores)]
        point = iqm(np.concatenate(rows))
        low, high = stratified_bootstrap_ci(rows, reps, confidence, seed)
        meta = dict(metadata)
        meta.setdefault("reps", reps)
        meta.setdefault("confidence", confidence)
        meta["small_n"] = sum(len(r) for r in rows) < 4
        # Percentile bounds can miss the point estimate by rounding only.
        return cls(rows, point, min(low, point), max(high, point), meta)

    def to_dict(self) -> dict:
        return asdict(self)
