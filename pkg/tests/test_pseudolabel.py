"""Tests for pseudo-label generation."""

import numpy as np
import pytest

from supportselect.domains import DomainSpec, ShiftSpec, UnlabeledDataset, generate_pair
from supportselect.errors import ValidationError
from supportselect.nncore import DenseLayer, Network, softmax
from supportselect.pseudolabel import (
    ensemble_pseudo_labels,
    pseudo_label_accuracy,
    single_backbone_pseudo_labels,
)


def _linear_net(weight, bias=None):
    """1-layer network with weights set explicitly."""
    layer = DenseLayer(weight.shape[0], weight.shape[1], np.random.default_rng(0))
    layer.weight.value = np.asarray(weight, dtype=float)
    layer.bias.value = np.zeros(weight.shape[1]) if bias is None else np.asarray(bias, float)
    return Network([layer])


def _dataset(features, labels=None):
    feats = np.asarray(features, dtype=float)
    hidden = np.zeros(len(feats), dtype=int) if labels is None else np.asarray(labels)
    return UnlabeledDataset(feats, hidden)


def test_ensemble_is_the_arithmetic_mean_of_member_probabilities():
    # backbones are identities; two different classifiers are emulated by
    # feeding two different backbones into a shared linear read-out
    f = _linear_net(np.eye(2))
    f_prime = _linear_net(2.0 * np.eye(2))  # doubles the logits
    g = _linear_net(np.eye(2))
    data = _dataset([[np.log(4.0), 0.0]])
    table = ensemble_pseudo_labels(f, f_prime, g, data)
    p1 = softmax(np.array([[np.log(4.0), 0.0]]))
    p2 = softmax(np.array([[2.0 * np.log(4.0), 0.0]]))
    assert np.allclose(table.mean_probabilities, 0.5 * (p1 + p2))
    assert table.labels.tolist() == [0]


def test_hand_built_mean_example():
    # member probabilities [0.8, 0.2] and [0.4, 0.6] average to [0.6, 0.4]
    mean = 0.5 * (np.array([0.8, 0.2]) + np.array([0.4, 0.6]))
    assert np.allclose(mean, [0.6, 0.4])
    f = _linear_net(np.eye(2))
    f_prime = _linear_net(np.eye(2))
    g = _linear_net(np.eye(2))
    logits1 = np.log([0.8, 0.2])
    data = _dataset([logits1])
    table = ensemble_pseudo_labels(f, f_prime, g, data)
    assert table.labels[0] == 0


def test_identical_members_degenerate_to_single_model():
    rng = np.random.default_rng(3)
    f = _linear_net(rng.normal(size=(4, 4)))
    g = _linear_net(rng.normal(size=(4, 3)))
    data = _dataset(rng.normal(size=(20, 4)))
    ens = ensemble_pseudo_labels(f, f, g, data)
    single = single_backbone_pseudo_labels(f, g, data)
    assert np.array_equal(ens.labels, single.labels)
    assert np.allclose(ens.mean_probabilities, single.mean_probabilities)


def test_table_matches_per_row_oracle():
    rng = np.random.default_rng(17)
    f = _linear_net(rng.normal(size=(5, 5)))
    f_prime = _linear_net(rng.normal(size=(5, 5)))
    g = _linear_net(rng.normal(size=(5, 2)))
    feats = rng.normal(size=(4, 5))
    data = _dataset(feats)
    table = ensemble_pseudo_labels(f, f_prime, g, data)
    for i in range(4):
        x = feats[i : i + 1]
        p1 = softmax(g.forward(f.forward(x, mode="eval"), mode="eval"))
        p2 = softmax(g.forward(f_prime.forward(x, mode="eval"), mode="eval"))
        mean = 0.5 * (p1 + p2)[0]
        assert np.allclose(table.mean_probabilities[i], mean, atol=1e-12)
        assert table.labels[i] == int(np.argmax(mean))


def test_partition_swap_symmetry_and_tie_rule():
    rng = np.random.default_rng(23)
    f = _linear_net(rng.normal(size=(3, 3)))
    f_prime = _linear_net(rng.normal(size=(3, 3)))
    g = _linear_net(rng.normal(size=(3, 4)))
    data = _dataset(rng.normal(size=(50, 3)))
    table = ensemble_pseudo_labels(f, f_prime, g, data)
    # partition of [0, M)
    counts = sum(len(v) for v in table.per_class_indices.values())
    assert counts == 50
    seen = np.concatenate([v for v in table.per_class_indices.values()])
    assert np.array_equal(np.sort(seen), np.arange(50))
    # member order does not matter
    swapped = ensemble_pseudo_labels(f_prime, f, g, data)
    assert np.array_equal(table.labels, swapped.labels)
    # exact ties break toward the lower class index
    tied = _dataset([[0.0, 0.0, 0.0]])
    t = ensemble_pseudo_labels(_linear_net(np.eye(3)), _linear_net(np.eye(3)), _linear_net(np.eye(3)), tied)
    assert t.labels[0] == 0


def test_single_backbone_shift_invariance_and_example():
    g = _linear_net(np.eye(3))
    f = _linear_net(np.eye(3))
    base = np.array([[0.2, 0.5, 0.3]])
    t1 = single_backbone_pseudo_labels(f, g, _dataset(base))
    t2 = single_backbone_pseudo_labels(f, g, _dataset(base + 7.0))
    assert t1.labels[0] == 1
    assert np.array_equal(t1.labels, t2.labels)


def test_accuracy_diagnostic():
    rng = np.random.default_rng(5)
    spec = DomainSpec(4, 3, 500, 5.0, 1.0, 2)
    _, target = generate_pair(spec, ShiftSpec())
    from supportselect.domains import evaluation_labels

    truth = evaluation_labels(target)
    from supportselect.pseudolabel import PseudoLabelTable

    def table_for(labels):
        probs = np.zeros((len(labels), 4))
        probs[np.arange(len(labels)), labels] = 1.0
        per = {c: np.flatnonzero(labels == c) for c in range(4)}
        return PseudoLabelTable(np.asarray(labels), probs, per)

    assert pseudo_label_accuracy(table_for(truth), target) == 1.0
    assert pseudo_label_accuracy(table_for((truth + 1) % 4), target) == 0.0
    random_labels = rng.integers(0, 4, size=len(truth))
    acc = pseudo_label_accuracy(table_for(random_labels), target)
    se = np.sqrt(0.25 * 0.75 / len(truth))
    assert abs(acc - 0.25) < 3 * se

    with pytest.raises(ValidationError):
        pseudo_label_accuracy(table_for(truth[:10]), target)
