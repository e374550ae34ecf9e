"""Supervised feature-slot ranking and minimal-subset selection.

Slots are ranked by a one-way ANOVA F statistic between classes (a
mutual-information scorer is available as an alternate). ``select_minimal``
then sweeps prefixes of the ranking, doubling then bisecting, to find the
smallest slot set whose accuracy stays within a tolerance of the best seen.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .features import SCHEMA_VERSION


@dataclass(frozen=True)
class FeatureScore:
    slot_index: int
    score: float
    rank: int


@dataclass(frozen=True)
class SelectionMask:
    """Ordered kept-slot indices; order follows the score ranking."""

    schema_version: str
    slots: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(set(self.slots)) != len(self.slots):
            raise ValueError("mask slots must be unique")
        if any(s < 0 for s in self.slots):
            raise ValueError("mask slots must be non-negative")

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump({"schema_version": self.schema_version, "slots": list(self.slots)},
                      fh, sort_keys=True, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> SelectionMask:
        with open(path) as fh:
            doc = json.load(fh)
        return cls(doc["schema_version"], tuple(int(s) for s in doc["slots"]))


def _class_codes(y: list[str] | np.ndarray) -> tuple[np.ndarray, int]:
    classes, codes = np.unique(np.asarray(y), return_inverse=True)
    return codes, classes.size


def anova_f_scores(X: np.ndarray, y: list[str] | np.ndarray) -> np.ndarray:
    """Per-slot one-way ANOVA F statistic between classes.

    Constant slots score 0. Slots whose within-class variance is zero but
    whose class means differ score +inf (perfect separation sentinel).
    """
    codes, k = _class_codes(y)
    n = X.shape[0]
    if k < 2:
        raise ValueError("feature scoring needs at least 2 classes")
    if n <= k:
        raise ValueError("feature scoring needs more samples than classes")
    overall = X.mean(axis=0)
    ssb = np.zeros(X.shape[1])
    ssw = np.zeros(X.shape[1])
    for c in range(k):
        block = X[codes == c]
        mean_c = block.mean(axis=0)
        ssb += block.shape[0] * (mean_c - overall) ** 2
        ssw += ((block - mean_c) ** 2).sum(axis=0)
    msb = ssb / (k - 1)
    msw = ssw / (n - k)
    constant = X.max(axis=0) == X.min(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(msw > 0, msb / np.where(msw > 0, msw, 1.0), np.inf)
    return np.where(constant, 0.0, f)


def mutual_info_scores(X: np.ndarray, y: list[str] | np.ndarray, bins: int = 16) -> np.ndarray:
    """Per-slot mutual information against the class label, equal-width bins."""
    codes, k = _class_codes(y)
    if k < 2:
        raise ValueError("feature scoring needs at least 2 classes")
    n = X.shape[0]
    out = np.zeros(X.shape[1])
    for j in range(X.shape[1]):
        col = X[:, j]
        lo, hi = col.min(), col.max()
        if hi <= lo:
            continue
        binned = np.minimum(((col - lo) / (hi - lo) * bins).astype(np.int64), bins - 1)
        joint = np.zeros((bins, k))
        np.add.at(joint, (binned, codes), 1.0)
        joint /= n
        outer = joint.sum(axis=1, keepdims=True) @ joint.sum(axis=0, keepdims=True)
        nz = joint > 0
        out[j] = float((joint[nz] * np.log(joint[nz] / outer[nz])).sum())
    return out


def score_features(X: np.ndarray, y: list[str] | np.ndarray,
                   method: str = "anova") -> list[FeatureScore]:
    """Rank all slots; returns scores in rank order (best first)."""
    if method == "anova":
        raw = anova_f_scores(X, y)
    elif method == "mutual_info":
        raw = mutual_info_scores(X, y)
    else:
        raise ValueError(f"unknown scoring method {method!r}")
    order = np.lexsort((np.arange(raw.size), -raw))
    return [FeatureScore(slot_index=int(s), score=float(raw[s]), rank=r + 1)
            for r, s in enumerate(order)]


def save_scores_csv(path: str | Path, scores: list[FeatureScore]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slot", "score", "rank"])
        for s in sorted(scores, key=lambda s: s.rank):
            writer.writerow([s.slot_index, repr(s.score), s.rank])


def select_minimal(X: np.ndarray, y: list[str] | np.ndarray,
                   evaluate: Callable[[np.ndarray, np.ndarray], float],
                   tolerance: float = 0.0,
                   method: str = "anova",
                   schema_version: str = SCHEMA_VERSION) -> SelectionMask:
    """Smallest rank-prefix mask whose accuracy is within tolerance of the best.

    ``evaluate`` receives (projected matrix, labels) and returns an accuracy.
    Prefix lengths 1, 2, 4, ... up to the full width are evaluated first; the
    target is the best of those minus ``tolerance``, and the boundary is then
    refined by bisection between the last failing and first passing lengths.
    """
    if tolerance < 0:
        raise ValueError("tolerance must be non-negative")
    scores = score_features(X, y, method=method)
    order = [s.slot_index for s in scores]
    y_arr = np.asarray(y)
    width = X.shape[1]

    grid = []
    m = 1
    while m < width:
        grid.append(m)
        m *= 2
    grid.append(width)

    cache: dict[int, float] = {}

    def accuracy(m: int) -> float:
        if m not in cache:
            cache[m] = float(evaluate(X[:, order[:m]], y_arr))
        return cache[m]

    best = max(accuracy(m) for m in grid)
    target = best - tolerance
    hi = next(m for m in grid if accuracy(m) >= target)
    lo = grid[grid.index(hi) - 1] if grid.index(hi) > 0 else 0
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if accuracy(mid) >= target:
            hi = mid
        else:
            lo = mid
    return SelectionMask(schema_version=schema_version, slots=tuple(order[:hi]))


def apply_mask(vectors: np.ndarray, mask: SelectionMask) -> np.ndarray:
    """Project vectors (1-D or 2-D) onto the mask's slots, in mask order."""
    idx = np.array(mask.slots, dtype=np.int64)
    if vectors.ndim == 1:
        if idx.size and idx.max() >= vectors.size:
            raise ValueError("mask slot out of range for this vector")
        return vectors[idx]
    if idx.size and idx.max() >= vectors.shape[1]:
        raise ValueError("mask slot out of range for this matrix")
    return vectors[:, idx]


def compose_masks(first: SelectionMask, second: SelectionMask) -> SelectionMask:
    """Mask equivalent to applying ``first`` then ``second``."""
    if any(s >= len(first.slots) for s in second.slots):
        raise ValueError("second mask indexes beyond the first mask's width")
    return SelectionMask(schema_version=first.schema_version,
                         slots=tuple(first.slots[s] for s in second.slots))
