"""Random-forest tests.

A reference CART builder written with plain scalar loops grows the same
deterministic tree (no bootstrap, all slots considered) and must agree with
the package's vectorized one node for node, threshold for threshold.
"""

import json

import numpy as np
import pytest

from flowcbr.cbr import ClassRegistry, Thresholds, VerdictKind
from flowcbr.forest import (
    EnsembleVerdict,
    ForestConfig,
    RandomForest,
    ensemble_classify,
    train_forest,
)
from flowcbr.index import IndexConfig, IndexEntry, NNIndex

MIN_IMPROVEMENT = 1e-12


def ref_best_split(X, codes, positions, n_classes, msl):
    """Exhaustive split search, one candidate threshold at a time."""
    n = len(positions)
    best = None
    for slot in range(X.shape[1]):
        pairs = sorted(((X[p, slot], codes[p]) for p in positions),
                       key=lambda t: t[0])
        vals = [v for v, _ in pairs]
        cds = [c for _, c in pairs]
        total = [0] * n_classes
        for c in cds:
            total[c] += 1
        left = [0] * n_classes
        slot_best = None
        for i in range(n - 1):
            left[cds[i]] += 1
            left_n = i + 1
            right_n = n - left_n
            if not (vals[i] < vals[i + 1] and left_n >= msl and right_n >= msl):
                continue
            score = (sum(c * c for c in left) / left_n
                     + sum((t - l) ** 2 for t, l in zip(total, left)) / right_n)
            if slot_best is None or score > slot_best[0]:
                slot_best = (score, i)
        if slot_best is None:
            continue
        score, i = slot_best
        if best is None or score > best[0]:
            threshold = (vals[i] + vals[i + 1]) / 2.0
            if threshold >= vals[i + 1]:
                threshold = float(vals[i])
            best = (score, slot, threshold)
    return best


def ref_build_tree(X, codes, positions, n_classes, msl, max_depth, depth=0):
    counts = [0] * n_classes
    for p in positions:
        counts[codes[p]] += 1
    n = len(positions)
    pure = sum(1 for c in counts if c) == 1
    if pure or n < 2 * msl or (max_depth is not None and depth >= max_depth):
        return {"counts": counts}
    best = ref_best_split(X, codes, positions, n_classes, msl)
    if best is None:
        return {"counts": counts}
    score, slot, threshold = best
    parent_score = sum(c * c for c in counts) / n
    if (score - parent_score) / n <= MIN_IMPROVEMENT:
        return {"counts": counts}
    left = [p for p in positions if X[p, slot] <= threshold]
    right = [p for p in positions if X[p, slot] > threshold]
    return {
        "slot": slot, "value": threshold,
        "left": ref_build_tree(X, codes, left, n_classes, msl, max_depth, depth + 1),
        "right": ref_build_tree(X, codes, right, n_classes, msl, max_depth, depth + 1),
    }


def load_saved_tree(forest, tmp_path, which=0):
    path = tmp_path / "forest.json"
    forest.save(path)
    doc = json.loads(path.read_text())
    nodes = doc["trees"][which]

    def expand(i):
        node = nodes[i]
        if "counts" in node:
            return {"counts": node["counts"]}
        return {"slot": node["slot"], "value": node["value"],
                "left": expand(node["left"]), "right": expand(node["right"])}

    return expand(0)


def assert_same_tree(got, want, path="root"):
    if "counts" in want:
        assert "counts" in got, f"{path}: expected a leaf"
        assert got["counts"] == want["counts"], path
        return
    assert "counts" not in got, f"{path}: expected a split"
    assert got["slot"] == want["slot"], path
    assert got["value"] == want["value"], path
    assert_same_tree(got["left"], want["left"], path + ".left")
    assert_same_tree(got["right"], want["right"], path + ".right")


def blobs(seed, n=90, d=6, k=3, spread=1.0):
    rng = np.random.default_rng(seed)
    y = np.array([f"c{i % k}" for i in range(n)])
    X = rng.normal(size=(n, d)) * spread
    for j in range(k):
        X[y == f"c{j}", j % d] += 4.0
    return X, y


@pytest.mark.parametrize("seed,msl,max_depth", [
    (0, 1, None), (1, 1, 3), (2, 5, None), (3, 2, 2),
])
def test_single_tree_matches_reference_cart(seed, msl, max_depth, tmp_path):
    X, y = blobs(seed, n=60, d=4)
    classes, codes = np.unique(y, return_inverse=True)
    config = ForestConfig(n_trees=1, bootstrap=False, features_per_split=X.shape[1],
                          min_samples_leaf=msl, max_depth=max_depth, seed=seed)
    forest = train_forest(X, y, config)
    want = ref_build_tree(X, codes, list(range(len(y))), classes.size, msl, max_depth)
    got = load_saved_tree(forest, tmp_path)
    assert_same_tree(got, want)


def ref_predict(tree, x, classes):
    while "counts" not in tree:
        tree = tree["left"] if x[tree["slot"]] <= tree["value"] else tree["right"]
    counts = tree["counts"]
    return str(classes[counts.index(max(counts))])


def test_single_tree_predictions_match_reference():
    X, y = blobs(7, n=80, d=5)
    classes, codes = np.unique(y, return_inverse=True)
    config = ForestConfig(n_trees=1, bootstrap=False, features_per_split=5, seed=7)
    forest = train_forest(X, y, config)
    ref = ref_build_tree(X, codes, list(range(len(y))), classes.size, 1, None)
    rng = np.random.default_rng(70)
    probes = np.vstack([X, rng.normal(size=(40, 5)) * 3])
    got, _ = forest.predict_batch(probes)
    want = [ref_predict(ref, x, classes) for x in probes]
    assert got == want


def test_training_is_deterministic(tmp_path):
    X, y = blobs(4)
    a = train_forest(X, y, ForestConfig(n_trees=12, seed=5))
    b = train_forest(X, y, ForestConfig(n_trees=12, seed=5))
    pa = tmp_path / "a.json"
    pb = tmp_path / "b.json"
    a.save(pa)
    b.save(pb)
    assert pa.read_bytes() == pb.read_bytes()


def test_forest_fits_separable_blobs():
    X, y = blobs(9, n=120, spread=0.5)
    forest = train_forest(X, y, ForestConfig(n_trees=25, seed=0))
    labels, fractions = forest.predict_batch(X)
    assert np.mean(np.array(labels) == y) >= 0.99
    assert fractions.min() > 0.0 and fractions.max() <= 1.0
    assert forest.oob_score is not None and 0.0 <= forest.oob_score <= 1.0


def test_no_bootstrap_means_no_oob():
    X, y = blobs(2)
    forest = train_forest(X, y, ForestConfig(n_trees=3, bootstrap=False))
    assert forest.oob_score is None


def test_classes_sorted_and_ties_go_first():
    # depth-0 trees vote the majority of their sample; on an exactly balanced
    # set with no bootstrap every tree ties, and the first class code wins
    X = np.arange(8.0).reshape(4, 2)
    y = ["zeta", "alpha", "zeta", "alpha"]
    forest = train_forest(X, y, ForestConfig(n_trees=5, bootstrap=False, max_depth=0))
    assert list(forest.classes) == ["alpha", "zeta"]
    label, fraction = forest.predict(np.array([1.0, 2.0]))
    assert label == "alpha"
    assert fraction == 1.0


def test_min_samples_leaf_respected_in_saved_trees(tmp_path):
    X, y = blobs(3, n=50)
    forest = train_forest(X, y, ForestConfig(n_trees=4, min_samples_leaf=7, seed=1))
    path = tmp_path / "forest.json"
    forest.save(path)
    doc = json.loads(path.read_text())
    for tree in doc["trees"]:
        for node in tree:
            if "counts" in node:
                assert sum(node["counts"]) >= 7


def test_max_depth_respected_in_saved_trees(tmp_path):
    X, y = blobs(6, n=100)
    forest = train_forest(X, y, ForestConfig(n_trees=4, max_depth=2, seed=2))
    path = tmp_path / "forest.json"
    forest.save(path)
    doc = json.loads(path.read_text())

    def depth(nodes, i=0):
        if "counts" in nodes[i]:
            return 0
        return 1 + max(depth(nodes, nodes[i]["left"]), depth(nodes, nodes[i]["right"]))

    assert all(depth(tree) <= 2 for tree in doc["trees"])


def test_snapshot_round_trip_query_identical(tmp_path):
    X, y = blobs(8, n=70, d=4)
    forest = train_forest(X, y, ForestConfig(n_trees=10, seed=3))
    path = tmp_path / "forest.json"
    forest.save(path)
    back = RandomForest.load(path)
    assert list(back.classes) == list(forest.classes)
    assert back.oob_score == forest.oob_score
    rng = np.random.default_rng(80)
    probes = rng.normal(size=(100, 4)) * 2
    a_labels, a_frac = forest.predict_batch(probes)
    b_labels, b_frac = back.predict_batch(probes)
    assert a_labels == b_labels
    np.testing.assert_array_equal(a_frac, b_frac)


def test_snapshot_rejects_corrupt_and_wrong_version(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("]{")
    with pytest.raises(ValueError, match="corrupt"):
        RandomForest.load(bad)
    versioned = tmp_path / "versioned.json"
    versioned.write_text(json.dumps({"format_version": 42}))
    with pytest.raises(ValueError, match="version"):
        RandomForest.load(versioned)


def test_training_validation_errors():
    X = np.zeros((4, 3))
    with pytest.raises(ValueError, match="2 classes"):
        train_forest(X, ["a"] * 4, ForestConfig())
    with pytest.raises(ValueError):
        train_forest(np.zeros((0, 3)), [], ForestConfig())
    with pytest.raises(ValueError, match="features_per_split"):
        train_forest(X, ["a", "a", "b", "b"], ForestConfig(features_per_split=9))
    with pytest.raises(ValueError):
        ForestConfig(n_trees=0)
    with pytest.raises(ValueError):
        ForestConfig(min_samples_leaf=0)


def test_predict_batch_requires_matrix():
    X, y = blobs(1)
    forest = train_forest(X, y, ForestConfig(n_trees=2))
    with pytest.raises(ValueError):
        forest.predict_batch(X[0])


def ensemble_setup():
    """1-D world: retrieval point at 0, forest trained on two blobs."""
    index = NNIndex.build([IndexEntry(0, np.array([0.0]), "base")],
                          IndexConfig("brute"))
    registry = ClassRegistry.from_training_labels(["base"])
    th = Thresholds(theta_new=1.0, theta_ood=2.0, k=1)
    Xf = np.array([[0.0], [0.1], [0.2], [5.0], [5.1], [5.2]])
    yf = ["low", "low", "low", "high", "high", "high"]
    forest = train_forest(Xf, yf, ForestConfig(n_trees=9, seed=0))
    return index, registry, forest, th


def test_ensemble_known_goes_to_forest():
    index, registry, forest, th = ensemble_setup()
    out = ensemble_classify(index, registry, forest, np.array([0.3]), th)
    assert isinstance(out, EnsembleVerdict)
    assert out.source == "Forest"
    assert out.verdict == "low"


def test_ensemble_ood_and_pending_pass_through():
    index, registry, forest, th = ensemble_setup()
    ood = ensemble_classify(index, registry, forest, np.array([9.0]), th)
    assert ood.source == "CBR"
    assert ood.verdict.kind is VerdictKind.OOD

    pending = ensemble_classify(index, registry, forest, np.array([1.5]), th)
    assert pending.source == "CBR"
    assert pending.verdict.kind is VerdictKind.PENDING


def test_ensemble_never_forest_labels_an_ood_sample():
    # c_min is set out of reach so the index stays frozen and distance from
    # the origin remains the ground truth for the whole stream
    index, registry, forest, _ = ensemble_setup()
    th = Thresholds(theta_new=1.0, theta_ood=2.0, k=1, c_min=10 ** 6)
    rng = np.random.default_rng(0)
    for _ in range(200):
        q = np.array([rng.uniform(-10, 10)])
        out = ensemble_classify(index, registry, forest, q, th)
        if abs(q[0]) > th.theta_ood:
            assert out.source == "CBR" and out.verdict.kind is VerdictKind.OOD
