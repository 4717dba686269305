"""Tests for K-means clustering and support-set selection."""

import itertools

import numpy as np
import pytest

from supportselect.domains import DomainSpec, ShiftSpec, UnlabeledDataset, generate_pair
from supportselect.errors import ParseError, ShapeError, ValidationError
from supportselect.nncore import DenseLayer, Network
from supportselect.pseudolabel import PseudoLabelTable
from supportselect.selection import (
    ClassFeatureBlock,
    SupportSet,
    class_balanced_select,
    cluster_select,
    euclidean_distance,
    kmeans,
    load_manifest,
    project_features,
    save_manifest,
    select_support,
)


def brute_force_inertia(points, k):
    """Exact optimum over all assignments into at most k clusters."""
    n = points.shape[0]
    best = np.inf
    for assignment in itertools.product(range(k), repeat=n):
        a = np.array(assignment)
        total = 0.0
        for j in range(k):
            members = points[a == j]
            if members.shape[0]:
                center = members.mean(axis=0)
                total += ((members - center) ** 2).sum()
        best = min(best, total)
    return best


def _table_for(labels, num_classes):
    labels = np.asarray(labels)
    probs = np.zeros((len(labels), num_classes))
    probs[np.arange(len(labels)), labels] = 1.0
    per = {c: np.flatnonzero(labels == c) for c in range(num_classes)}
    return PseudoLabelTable(labels, probs, per)


# ------------------------------------------------------------------ kmeans


def test_kmeans_two_well_separated_pairs():
    pts = np.array([[0.0], [1.0], [10.0], [11.0]])
    result = kmeans(pts, 2, seed=0)
    assert sorted(result.centers.ravel().tolist()) == [0.5, 10.5]
    assert result.inertia == pytest.approx(1.0)
    assert result.inertia == pytest.approx(brute_force_inertia(pts, 2))


def test_kmeans_identical_rows_single_cluster():
    pts = np.tile([[3.0, -1.0]], (5, 1))
    result = kmeans(pts, 1, seed=0)
    assert np.allclose(result.centers, [[3.0, -1.0]])
    assert result.inertia == pytest.approx(0.0)


def test_kmeans_k_equals_n_gives_singletons():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(4, 2))
    result = kmeans(pts, 4, seed=1)
    assert result.inertia == pytest.approx(0.0, abs=1e-18)
    assert sorted(result.assignment.tolist()) == [0, 1, 2, 3]


def test_kmeans_validates_arguments():
    with pytest.raises(ValidationError):
        kmeans(np.zeros((3, 2)), 0)
    with pytest.raises(ValidationError):
        kmeans(np.zeros((0, 2)), 1)


def test_kmeans_deficient_when_fewer_rows_than_clusters():
    pts = np.array([[0.0, 0.0], [5.0, 5.0]])
    result = kmeans(pts, 3, seed=0)
    assert result.deficient
    assert result.centers.shape == (2, 2)
    assert np.array_equal(result.assignment, [0, 1])


def test_kmeans_centers_are_means_and_inertia_monotone():
    rng = np.random.default_rng(8)
    for _ in range(10):
        pts = rng.normal(size=(30, 3))
        result = kmeans(pts, 4, seed=3)
        for j in range(4):
            members = pts[result.assignment == j]
            if members.shape[0]:
                assert np.abs(result.centers[j] - members.mean(axis=0)).max() < 1e-9
        trace = np.array(result.inertia_trace)
        assert (np.diff(trace) <= 1e-12).all()


def test_kmeans_exhaustive_restarts_reach_brute_force_optimum():
    rng = np.random.default_rng(12)
    for _ in range(25):
        n = int(rng.integers(3, 9))
        k = int(rng.integers(1, 4))
        d = int(rng.integers(1, 4))
        pts = rng.normal(size=(n, min(d, n)))
        if k > n:
            continue
        result = kmeans(pts, k, init="exhaustive")
        assert result.inertia == pytest.approx(brute_force_inertia(pts, k), abs=1e-9)


def test_kmeans_deterministic_in_seed():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(40, 3))
    r1 = kmeans(pts, 3, seed=9)
    r2 = kmeans(pts, 3, seed=9)
    assert np.array_equal(r1.centers, r2.centers)
    assert np.array_equal(r1.assignment, r2.assignment)


# ------------------------------------------------------------------ distance


def test_euclidean_examples():
    assert euclidean_distance([3.0, 4.0], [0.0, 0.0]) == pytest.approx(5.0)
    assert euclidean_distance([1.0, 2.0], [1.0, 2.0]) == 0.0
    rng = np.random.default_rng(4)
    z, mu = rng.normal(size=16), rng.normal(size=16)
    manual = sum((a - b) ** 2 for a, b in zip(z, mu)) ** 0.5
    assert abs(euclidean_distance(z, mu) - manual) < 1e-12
    with pytest.raises(ShapeError):
        euclidean_distance([1.0], [1.0, 2.0])


# ------------------------------------------------------------------ projection


def _identity_net():
    return Network([])


def _random_linear(in_w, out_w, seed):
    layer = DenseLayer(in_w, out_w, np.random.default_rng(seed))
    return Network([layer])


def test_project_features_blocks():
    rng = np.random.default_rng(6)
    feats = rng.normal(size=(10, 4))
    data = UnlabeledDataset(feats, np.zeros(10, dtype=int))
    table = _table_for(np.zeros(10, dtype=int), 2)
    blocks = project_features(_identity_net(), _identity_net(), data, table)
    assert len(blocks) == 1  # class 1 is empty
    assert blocks[0].class_id == 0
    assert np.array_equal(blocks[0].features, feats)

    # identity projector: block rows equal backbone features
    backbone = _random_linear(4, 3, 1)
    blocks = project_features(backbone, _identity_net(), data, table)
    assert np.allclose(blocks[0].features, backbone.forward(feats, mode="eval"))

    # batched projection equals sample-by-sample forward
    q = _random_linear(3, 2, 2)
    blocks = project_features(backbone, q, data, table)
    for row, idx in zip(blocks[0].features, blocks[0].indices):
        single = q.forward(backbone.forward(feats[idx : idx + 1], mode="eval"), mode="eval")
        assert np.allclose(row, single[0], atol=1e-12)


# ------------------------------------------------------------------ selection


def test_select_support_minimum_distance_three_points():
    feats = np.array([[0.0, 0.0], [1.0, 0.0], [10.0, 0.0]])
    block = ClassFeatureBlock(0, np.arange(3), feats)
    result = kmeans(feats, 1, seed=0)
    support = select_support([block], [result], 1)
    center = feats.mean(axis=0)
    dists = [euclidean_distance(f, center) for f in feats]
    assert len(support) == 1
    assert support.entries[0].target_index == int(np.argmin(dists))
    assert support.entries[0].distance_score == pytest.approx(min(dists))


def test_select_support_singleton_clusters_take_everything():
    rng = np.random.default_rng(3)
    feats = rng.normal(size=(4, 2))
    block = ClassFeatureBlock(0, np.arange(4), feats)
    result = kmeans(feats, 4, seed=0)
    support = select_support([block], [result], 4)
    assert sorted(e.target_index for e in support.entries) == [0, 1, 2, 3]
    assert all(e.distance_score == pytest.approx(0.0, abs=1e-12) for e in support.entries)


def test_budget_is_k_per_populated_class():
    rng = np.random.default_rng(5)
    blocks, results = [], []
    for c in range(3):
        feats = rng.normal(size=(20, 2)) + 5 * c
        blocks.append(ClassFeatureBlock(c, np.arange(c * 20, (c + 1) * 20), feats))
        results.append(kmeans(feats, 2, seed=c))
    support = select_support(blocks, results, 2)
    assert len(support) == 6  # K*C with all classes populous
    pairs = {(e.pseudo_class, e.cluster_id) for e in support.entries}
    assert len(pairs) == 6  # per-cluster uniqueness
    assert len(set(e.target_index for e in support.entries)) == 6


def test_select_support_empty_blocks_rejected():
    with pytest.raises(ValidationError):
        select_support([], [], 1)


def test_full_cluster_select_contract_and_minimality():
    rng = np.random.default_rng(11)
    spec = DomainSpec(3, 4, 30, 4.0, 1.0, 3)
    _, target = generate_pair(spec, ShiftSpec())
    labels = rng.integers(0, 3, size=len(target))
    table = _table_for(labels, 3)
    backbone = _random_linear(4, 4, 7)
    q = _random_linear(4, 2, 8)
    support = cluster_select(backbone, q, target, table, k=2, seed=0)
    expected = sum(min(2, (labels == c).sum()) for c in range(3))
    assert len(support) == expected
    # minimality: brute-force rescoring within each cluster
    blocks = project_features(backbone, q, target, table)
    results = [
        # reproduce the kmeans calls cluster_select makes
        kmeans(b.features, 2, seed=0 + b.class_id)
        for b in blocks
    ]
    by_class = {b.class_id: (b, r) for b, r in zip(blocks, results)}
    for e in support.entries:
        block, result = by_class[e.pseudo_class]
        members = np.flatnonzero(result.assignment == e.cluster_id)
        best = min(
            euclidean_distance(block.features[m], result.centers[e.cluster_id])
            for m in members
        )
        assert e.distance_score == pytest.approx(best)


def test_class_balanced_requires_flag_and_is_exact():
    spec = DomainSpec(3, 4, 20, 6.0, 0.5, 9)
    _, target = generate_pair(spec, ShiftSpec())
    backbone = _identity_net()
    q = _identity_net()
    with pytest.raises(ValidationError):
        class_balanced_select(target, backbone, q, 2)
    support = class_balanced_select(target, backbone, q, 2, ground_truth_ok=True)
    assert len(support) == 6
    per_class = {c: 0 for c in range(3)}
    for e in support.entries:
        per_class[e.pseudo_class] += 1
    assert all(v == 2 for v in per_class.values())


def test_class_balanced_equals_cluster_select_when_pseudolabels_perfect():
    from supportselect.domains import evaluation_labels

    spec = DomainSpec(3, 4, 15, 6.0, 0.5, 13)
    _, target = generate_pair(spec, ShiftSpec())
    truth = evaluation_labels(target)
    table = _table_for(truth, 3)
    backbone, q = _identity_net(), _identity_net()
    unsup = cluster_select(backbone, q, target, table, k=2, seed=5)
    bal = class_balanced_select(target, backbone, q, 2, seed=5, ground_truth_ok=True)
    assert [e.target_index for e in unsup.entries] == [e.target_index for e in bal.entries]


def test_attach_labels_uses_the_annotate_door():
    spec = DomainSpec(2, 4, 10, 6.0, 0.5, 1)
    _, target = generate_pair(spec, ShiftSpec())
    feats = target.features
    block = ClassFeatureBlock(0, np.arange(5), feats[:5])
    support = select_support([block], [kmeans(feats[:5], 2, seed=0)], 2)
    assert target.annotation_log == []
    support.attach_labels(target)
    assert len(target.annotation_log) == 1
    assert set(target.annotation_log[0]) == set(support.indices().tolist())
    assert all(e.true_label is not None for e in support.entries)


# ------------------------------------------------------------------ manifest


def test_manifest_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    feats = rng.normal(size=(12, 3))
    block = ClassFeatureBlock(0, np.arange(12), feats)
    support = select_support([block], [kmeans(feats, 3, seed=0)], 3)
    support.entries[0].true_label = 1
    p = tmp_path / "support.manifest"
    save_manifest(support, p)
    loaded = load_manifest(p)
    assert loaded.k == support.k
    assert loaded.selector == support.selector
    assert len(loaded) == len(support)
    for a, b in zip(loaded.entries, support.entries):
        assert (a.target_index, a.pseudo_class, a.cluster_id) == (
            b.target_index,
            b.pseudo_class,
            b.cluster_id,
        )
        assert a.distance_score == b.distance_score  # 17 digits: exact
        assert a.true_label == b.true_label


def test_manifest_truncation_refused(tmp_path):
    rng = np.random.default_rng(2)
    feats = rng.normal(size=(6, 2))
    block = ClassFeatureBlock(0, np.arange(6), feats)
    support = select_support([block], [kmeans(feats, 2, seed=0)], 2)
    p = tmp_path / "support.manifest"
    save_manifest(support, p)
    lines = p.read_text().splitlines()
    p.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(ParseError):
        load_manifest(p)
