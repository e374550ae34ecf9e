"""Random-forest baseline, built from scratch on CART trees.

Trees grow on bootstrap samples with Gini-impurity splits over a random
subset of feature slots per node (ceil(sqrt(d)) by default). Everything is
seeded: the same config and data always produce the same forest. The
ensemble combiner at the bottom routes retrieval verdicts: rejection and
new-class outcomes pass through, everything recognized goes to the forest.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cbr import ClassRegistry, Thresholds, Verdict, VerdictKind, classify
from .index import NNIndex

SNAPSHOT_VERSION = 1
MIN_IMPROVEMENT = 1e-12


@dataclass
class ForestConfig:
    n_trees: int = 100
    max_depth: int | None = None
    min_samples_leaf: int = 1
    features_per_split: int | None = None
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")


class _Node:
    __slots__ = ("slot", "value", "left", "right", "counts")

    def __init__(self, slot=None, value=None, left=None, right=None, counts=None):
        self.slot = slot
        self.value = value
        self.left = left
        self.right = right
        self.counts = counts


def _best_split(X: np.ndarray, codes: np.ndarray, positions: np.ndarray,
                candidates: np.ndarray, n_classes: int,
                min_samples_leaf: int) -> tuple[float, int, float] | None:
    """Best (score, slot, threshold) over candidate slots, or None.

    The score is sum(left_counts^2)/n_left + sum(right_counts^2)/n_right;
    maximizing it minimizes the weighted Gini impurity of the children.
    Counts are integers, so the score is exact float arithmetic.
    """
    n = positions.size
    sub_codes = codes[positions]
    best: tuple[float, int, float] | None = None
    for slot in candidates:
        col = X[positions, slot]
        order = np.argsort(col, kind="stable")
        sorted_vals = col[order]
        onehot = np.zeros((n, n_classes))
        onehot[np.arange(n), sub_codes[order]] = 1.0
        cum = onehot.cumsum(axis=0)
        total = cum[-1]
        left_counts = cum[:-1]
        left_n = np.arange(1, n, dtype=np.float64)
        right_n = n - left_n
        valid = ((sorted_vals[:-1] < sorted_vals[1:])
                 & (left_n >= min_samples_leaf)
                 & (right_n >= min_samples_leaf))
        if not valid.any():
            continue
        score = ((left_counts ** 2).sum(axis=1) / left_n
                 + ((total - left_counts) ** 2).sum(axis=1) / right_n)
        score = np.where(valid, score, -np.inf)
        i = int(np.argmax(score))
        if best is None or score[i] > best[0]:
            threshold = (sorted_vals[i] + sorted_vals[i + 1]) / 2.0
            if threshold >= sorted_vals[i + 1]:
                threshold = float(sorted_vals[i])
            best = (float(score[i]), int(slot), float(threshold))
    return best


def _build_tree(X: np.ndarray, codes: np.ndarray, positions: np.ndarray,
                n_classes: int, config: ForestConfig, fps: int,
                rng: np.random.Generator, depth: int) -> _Node:
    counts = np.bincount(codes[positions], minlength=n_classes)
    n = positions.size
    if (np.count_nonzero(counts) == 1
            or n < 2 * config.min_samples_leaf
            or (config.max_depth is not None and depth >= config.max_depth)):
        return _Node(counts=counts)
    candidates = np.sort(rng.choice(X.shape[1], size=fps, replace=False))
    best = _best_split(X, codes, positions, candidates, n_classes, config.min_samples_leaf)
    if best is None:
        return _Node(counts=counts)
    score, slot, threshold = best
    parent_score = float((counts.astype(np.float64) ** 2).sum()) / n
    if (score - parent_score) / n <= MIN_IMPROVEMENT:
        return _Node(counts=counts)
    mask = X[positions, slot] <= threshold
    return _Node(
        slot=slot, value=threshold,
        left=_build_tree(X, codes, positions[mask], n_classes, config, fps, rng, depth + 1),
        right=_build_tree(X, codes, positions[~mask], n_classes, config, fps, rng, depth + 1),
    )


def _tree_votes(root: _Node, X: np.ndarray) -> np.ndarray:
    """Per-row class code voted by this tree (leaf majority, first on ties)."""
    out = np.empty(X.shape[0], dtype=np.int64)

    def walk(node: _Node, idx: np.ndarray) -> None:
        if idx.size == 0:
            return
        if node.counts is not None:
            out[idx] = int(np.argmax(node.counts))
            return
        mask = X[idx, node.slot] <= node.value
        walk(node.left, idx[mask])
        walk(node.right, idx[~mask])

    walk(root, np.arange(X.shape[0]))
    return out


class RandomForest:
    def __init__(self, config: ForestConfig, classes: np.ndarray,
                 trees: list[_Node], oob_score: float | None = None) -> None:
        self.config = config
        self.classes = classes
        self.trees = trees
        self.oob_score = oob_score

    @property
    def dimension_hint(self) -> int | None:
        for tree in self.trees:
            def max_slot(node: _Node) -> int:
                if node.counts is not None:
                    return -1
                return max(node.slot, max_slot(node.left), max_slot(node.right))
            s = max_slot(tree)
            if s >= 0:
                return s + 1
        return None

    def predict_batch(self, X: np.ndarray) -> tuple[list[str], np.ndarray]:
        """(labels, vote fractions) for each row by majority over trees."""
        if X.ndim != 2:
            raise ValueError("predict_batch expects a 2-D matrix")
        tally = np.zeros((X.shape[0], self.classes.size), dtype=np.int64)
        for tree in self.trees:
            votes = _tree_votes(tree, X)
            tally[np.arange(X.shape[0]), votes] += 1
        winners = tally.argmax(axis=1)
        fractions = tally[np.arange(X.shape[0]), winners] / len(self.trees)
        return [str(self.classes[w]) for w in winners], fractions

    def predict(self, v: np.ndarray) -> tuple[str, float]:
        labels, fractions = self.predict_batch(np.asarray(v, dtype=np.float64)[None, :])
        return labels[0], float(fractions[0])

    def save(self, path: str | Path) -> None:
        doc = {
            "format_version": SNAPSHOT_VERSION,
            "config": {
                "n_trees": self.config.n_trees,
                "max_depth": self.config.max_depth,
                "min_samples_leaf": self.config.min_samples_leaf,
                "features_per_split": self.config.features_per_split,
                "bootstrap": self.config.bootstrap,
                "seed": self.config.seed,
            },
            "classes": [str(c) for c in self.classes],
            "oob_score": self.oob_score,
            "trees": [_serialize_tree(t) for t in self.trees],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> RandomForest:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"corrupt forest snapshot {path}: {exc}") from None
        if doc.get("format_version") != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {doc.get('format_version')!r}")
        config = ForestConfig(**doc["config"])
        classes = np.array(doc["classes"])
        trees = [_deserialize_tree(t) for t in doc["trees"]]
        return cls(config, classes, trees, doc.get("oob_score"))


def _serialize_tree(root: _Node) -> list[dict]:
    nodes: list[dict] = []

    def walk(node: _Node) -> int:
        slot = len(nodes)
        if node.counts is not None:
            nodes.append({"counts": [int(c) for c in node.counts]})
            return slot
        nodes.append({})
        left = walk(node.left)
        right = walk(node.right)
        nodes[slot] = {"slot": node.slot, "value": node.value, "left": left, "right": right}
        return slot

    walk(root)
    return nodes


def _deserialize_tree(nodes: list[dict]) -> _Node:
    def build(i: int) -> _Node:
        doc = nodes[i]
        if "counts" in doc:
            return _Node(counts=np.array(doc["counts"], dtype=np.int64))
        return _Node(slot=int(doc["slot"]), value=float(doc["value"]),
                     left=build(int(doc["left"])), right=build(int(doc["right"])))

    return build(0)


def train_forest(X: np.ndarray, y: list[str] | np.ndarray,
                 config: ForestConfig) -> RandomForest:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("training needs a non-empty 2-D matrix")
    classes, codes = np.unique(np.asarray(y), return_inverse=True)
    if classes.size < 2:
        raise ValueError("training needs at least 2 classes")
    n, d = X.shape
    fps = config.features_per_split
    if fps is None:
        fps = math.ceil(math.sqrt(d))
    if not 1 <= fps <= d:
        raise ValueError(f"features_per_split must be in [1, {d}]")

    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(config.n_trees)]
    trees = []
    oob_tally = np.zeros((n, classes.size), dtype=np.int64)
    for rng in rngs:
        if config.bootstrap:
            sample = rng.integers(0, n, size=n)
            oob = np.setdiff1d(np.arange(n), sample)
        else:
            sample = np.arange(n)
            oob = np.zeros(0, dtype=np.int64)
        tree = _build_tree(X, codes, sample, classes.size, config, fps, rng, depth=0)
        trees.append(tree)
        if oob.size:
            votes = _tree_votes(tree, X[oob])
            oob_tally[oob, votes] += 1

    oob_score = None
    if config.bootstrap:
        covered = oob_tally.sum(axis=1) > 0
        if covered.any():
            hits = oob_tally[covered].argmax(axis=1) == codes[covered]
            oob_score = float(hits.mean())
    return RandomForest(config, classes, trees, oob_score)


@dataclass(frozen=True)
class EnsembleVerdict:
    source: str
    verdict: Verdict | str


def ensemble_classify(index: NNIndex, registry: ClassRegistry, forest: RandomForest,
                      q: np.ndarray, th: Thresholds) -> EnsembleVerdict:
    """Retrieval screens the sample; the forest labels what it recognizes.

    Rejected (OOD) and new-class outcomes are returned as-is with source
    "CBR"; recognized samples get the forest's label with source "Forest".
    """
    verdict = classify(index, registry, q, th)
    if verdict.kind is VerdictKind.KNOWN:
        label, _ = forest.predict(q)
        return EnsembleVerdict(source="Forest", verdict=label)
    return EnsembleVerdict(source="CBR", verdict=verdict)
