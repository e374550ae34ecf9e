"""Classification by retrieval: vote, reject, or register.

A query is labeled by majority vote over its k nearest stored neighbors when
the nearest one is close enough. Far beyond the out-of-distribution
threshold the sample is rejected outright. In between, samples collect in a
pending buffer; once enough mutually close candidates accumulate they become
a brand-new class, inserted into the live index without any retraining.
"""

from __future__ import annotations

import enum
import json
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .index import IndexEntry, Neighbor, NNIndex, row_distances

PENDING_CAPACITY = 1000
DEFAULT_K = 5
DEFAULT_C_MIN = 5
DEFAULT_QUANTILE_NEW = 0.99
DEFAULT_QUANTILE_OOD = 0.999
DEFAULT_OOD_MARGIN = 1.5
THETA_EPS = 1e-9


class VerdictKind(enum.Enum):
    KNOWN = "Known"
    PENDING = "NewClassPending"
    REGISTERED = "NewClassRegistered"
    OOD = "OOD"


@dataclass(frozen=True)
class Thresholds:
    theta_new: float
    theta_ood: float
    k: int = DEFAULT_K
    c_min: int = DEFAULT_C_MIN
    r_cohesion: float | None = None

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not (0 < self.theta_new <= self.theta_ood):
            raise ValueError("need 0 < theta_new <= theta_ood")
        if self.c_min < 1:
            raise ValueError("c_min must be >= 1")
        if self.r_cohesion is None:
            # Default: candidates must sit within one rejection diameter.
            object.__setattr__(self, "r_cohesion", 2.0 * self.theta_ood)
        if self.r_cohesion <= 0:
            raise ValueError("r_cohesion must be positive")

    def save(self, path: str | Path) -> None:
        doc = {"theta_new": self.theta_new, "theta_ood": self.theta_ood,
               "k": self.k, "c_min": self.c_min, "r_cohesion": self.r_cohesion}
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> Thresholds:
        with open(path) as fh:
            doc = json.load(fh)
        return cls(theta_new=doc["theta_new"], theta_ood=doc["theta_ood"],
                   k=int(doc["k"]), c_min=int(doc["c_min"]),
                   r_cohesion=doc["r_cohesion"])


@dataclass(frozen=True)
class Verdict:
    kind: VerdictKind
    label: str | None
    votes: dict[str, int]
    min_distance: float


@dataclass
class ClassRegistry:
    """Known labels plus the buffer of would-be new-class samples."""

    labels: dict[str, str] = field(default_factory=dict)
    pending: deque = field(default_factory=lambda: deque(maxlen=PENDING_CAPACITY))
    novel_count: int = 0
    stream_pos: int = 0

    @classmethod
    def from_training_labels(cls, labels: list[str]) -> ClassRegistry:
        reg = cls()
        for label in labels:
            reg.labels.setdefault(label, "trained")
        return reg

    def add_label(self, label: str, origin: str) -> None:
        if label not in self.labels:
            self.labels[label] = origin

    def next_novel_label(self) -> str:
        self.novel_count += 1
        return f"novel-{self.novel_count}"

    def clone(self) -> ClassRegistry:
        reg = ClassRegistry(labels=dict(self.labels), novel_count=self.novel_count,
                            stream_pos=self.stream_pos)
        reg.pending.extend((v.copy(), t) for v, t in self.pending)
        return reg

    def save(self, path: str | Path) -> None:
        doc = {
            "labels": self.labels,
            "novel_count": self.novel_count,
            "stream_pos": self.stream_pos,
            "pending": [{"vector": v.tolist(), "stream_pos": t} for v, t in self.pending],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> ClassRegistry:
        with open(path) as fh:
            doc = json.load(fh)
        reg = cls(labels=dict(doc["labels"]), novel_count=int(doc["novel_count"]),
                  stream_pos=int(doc["stream_pos"]))
        reg.pending.extend((np.array(p["vector"], dtype=np.float64), int(p["stream_pos"]))
                           for p in doc["pending"])
        return reg


def vote(neighbors: list[Neighbor]) -> tuple[str, int]:
    """Majority label; ties go to the smaller summed distance, then name."""
    if not neighbors:
        raise ValueError("vote needs at least one neighbor")
    counts: dict[str, int] = {}
    sums: dict[str, float] = {}
    for n in neighbors:
        counts[n.label] = counts.get(n.label, 0) + 1
        sums[n.label] = sums.get(n.label, 0.0) + n.distance
    winner = min(counts, key=lambda lbl: (-counts[lbl], sums[lbl], lbl))
    return winner, counts[winner]


def _neighbor_votes(neighbors: list[Neighbor]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for n in neighbors:
        counts[n.label] = counts.get(n.label, 0) + 1
    return counts


def classify(index: NNIndex, registry: ClassRegistry, q: np.ndarray,
             th: Thresholds) -> Verdict:
    """One retrieval decision; may buffer the sample or register a class.

    The nearest distance d1 picks the regime: at most theta_new means a known
    class (majority vote over k neighbors); beyond theta_ood means rejection,
    and the sample is not buffered; in between the sample joins the pending
    buffer, and once c_min buffered samples sit pairwise within r_cohesion a
    new class is registered from them and inserted into the index.
    """
    q = np.asarray(q, dtype=np.float64)
    neighbors = index.query_knn(q, th.k)
    d1 = neighbors[0].distance
    votes = _neighbor_votes(neighbors)
    registry.stream_pos += 1
    if d1 <= th.theta_new:
        label, _ = vote(neighbors)
        return Verdict(VerdictKind.KNOWN, label, votes, d1)
    if d1 > th.theta_ood:
        return Verdict(VerdictKind.OOD, None, votes, d1)

    registry.pending.append((q.copy(), registry.stream_pos))
    cohort = _cohesive_cohort(registry, q, th.r_cohesion)
    if len(cohort) < th.c_min:
        return Verdict(VerdictKind.PENDING, None, votes, d1)

    label = registry.next_novel_label()
    registry.add_label(label, origin="registered")
    founders = {id(v) for v, _ in cohort}
    for v, _ in cohort:
        index.insert(IndexEntry(index.next_id(), v, label))
    remaining = [(v, t) for v, t in registry.pending if id(v) not in founders]
    registry.pending.clear()
    registry.pending.extend(remaining)
    return Verdict(VerdictKind.REGISTERED, label, votes, d1)


def _cohesive_cohort(registry: ClassRegistry, q: np.ndarray,
                     r_cohesion: float) -> list[tuple[np.ndarray, int]]:
    """Greedy pairwise-close subset of the buffer around the newest sample.

    Buffered samples are taken oldest first and kept only if within
    r_cohesion of every sample already kept, which guarantees the returned
    set is mutually cohesive. The newest sample (q, just appended) is the
    anchor and always belongs.
    """
    anchor = registry.pending[-1]
    kept = [anchor]
    kept_matrix = [anchor[0]]
    for item in list(registry.pending)[:-1]:
        dists = row_distances(np.stack(kept_matrix), item[0])
        if np.all(dists <= r_cohesion):
            kept.append(item)
            kept_matrix.append(item[0])
    return kept


def calibrate_thresholds(X: np.ndarray, y: list[str] | np.ndarray,
                         quantile_new: float = DEFAULT_QUANTILE_NEW,
                         quantile_ood: float = DEFAULT_QUANTILE_OOD,
                         ood_margin: float = DEFAULT_OOD_MARGIN,
                         k: int = DEFAULT_K,
                         c_min: int = DEFAULT_C_MIN,
                         r_cohesion: float | None = None) -> Thresholds:
    """Set thresholds from leave-one-out same-class nearest-neighbor distances.

    theta_new is the quantile_new quantile of that distribution (floored at a
    tiny epsilon), theta_ood the quantile_ood quantile scaled by ood_margin.
    Classes with a single sample are skipped with a warning.
    """
    y_arr = np.asarray(y)
    nn_dists: list[float] = []
    skipped = []
    for label in np.unique(y_arr):
        block = X[y_arr == label]
        if block.shape[0] < 2:
            skipped.append(str(label))
            continue
        for i in range(block.shape[0]):
            d = row_distances(np.delete(block, i, axis=0), block[i])
            nn_dists.append(float(d.min()))
    if skipped:
        warnings.warn(f"classes with one sample skipped in calibration: {skipped}",
                      stacklevel=2)
    if not nn_dists:
        raise ValueError("calibration needs at least one class with >= 2 samples")
    arr = np.array(nn_dists)
    theta_new = max(float(np.quantile(arr, quantile_new)), THETA_EPS)
    theta_ood = max(theta_new, float(np.quantile(arr, quantile_ood)) * ood_margin)
    return Thresholds(theta_new=theta_new, theta_ood=theta_ood, k=k,
                      c_min=c_min, r_cohesion=r_cohesion)


def add_labeled_sample(index: NNIndex, registry: ClassRegistry,
                       vector: np.ndarray, label: str) -> None:
    """Insert one labeled vector; registers the label if it is new."""
    v = np.asarray(vector, dtype=np.float64)
    index.insert(IndexEntry(index.next_id(), v, label))
    registry.add_label(label, origin="registered")


def verdict_to_json(flow_id: str, verdict: Verdict) -> str:
    doc = {
        "flow_id": flow_id,
        "kind": verdict.kind.value,
        "label": verdict.label,
        "min_distance": verdict.min_distance,
        "votes": verdict.votes,
    }
    return json.dumps(doc, sort_keys=True)


def write_verdicts(path: str | Path, items: list[tuple[str, Verdict]]) -> None:
    with open(path, "w") as fh:
        for flow_id, verdict in items:
            fh.write(verdict_to_json(flow_id, verdict) + "\n")
