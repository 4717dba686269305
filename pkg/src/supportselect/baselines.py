"""Comparison selectors: class-balanced random, entropy top-K, MC-dropout.

All three emit the same ``SupportSet`` shape as the clustering selector, so
the adaptation stage never needs to know who picked the samples. For the
uncertainty selectors the per-class grouping uses the model's own predicted
class by default (the source-free reading); grouping by true class exists
behind the ground-truth flag for study.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domains import UnlabeledDataset, true_class_indices
from .errors import ValidationError
from .nncore import DropoutLayer, Network, softmax
from .selection import SupportEntry, SupportSet


@dataclass(frozen=True)
class BaselineConfig:
    kind: str = "random_balanced"  # random_balanced | entropy | mc_dropout
    passes: int = 10
    dropout_probability: float = 0.5

    def __post_init__(self):
        if self.kind not in ("random_balanced", "entropy", "mc_dropout"):
            raise ValidationError(f"unknown baseline kind {self.kind!r}")
        if self.passes < 1:
            raise ValidationError("passes must be >= 1")


def shannon_entropy(probabilities):
    """-sum p ln p per row (natural log, 0 log 0 = 0). Scalar for one row."""
    p = np.atleast_2d(np.asarray(probabilities, dtype=float))
    terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    ent = -terms.sum(axis=1)
    return float(ent[0]) if ent.shape[0] == 1 else ent


def _top_k_per_group(groups, scores, k):
    """Per group, take the k highest scores (stable: ties to lower index)."""
    entries = []
    for c in sorted(groups):
        idx = np.asarray(groups[c], dtype=int)
        if idx.size == 0:
            continue
        order = np.argsort(-scores[idx], kind="stable")
        take = order[: min(k, idx.size)]
        for rank, pos in enumerate(take):
            entries.append(
                SupportEntry(
                    target_index=int(idx[pos]),
                    pseudo_class=int(c),
                    cluster_id=rank,
                    distance_score=float(scores[idx[pos]]),
                )
            )
    return entries


def random_balanced_select(
    data: UnlabeledDataset, k: int, seed: int, ground_truth_ok: bool = False
) -> SupportSet:
    """K uniform draws per true class, without replacement.

    Balancing needs the true labels, so this baseline lives behind the
    ground-truth flag. Classes with fewer than K members contribute all of
    them.
    """
    groups = true_class_indices(data, ground_truth_ok=ground_truth_ok)
    rng = np.random.default_rng(seed)
    entries = []
    for c in sorted(groups):
        idx = np.asarray(groups[c], dtype=int)
        take = min(k, idx.size)
        chosen = np.sort(rng.choice(idx, size=take, replace=False))
        for rank, target_index in enumerate(chosen):
            entries.append(
                SupportEntry(
                    target_index=int(target_index),
                    pseudo_class=int(c),
                    cluster_id=rank,
                    distance_score=0.0,
                )
            )
    num_classes = max(groups) + 1 if groups else 0
    return SupportSet(entries, k, num_classes, seed, selector="random", mode="ground_truth")


def _eval_probabilities(backbone: Network, classifier: Network, features):
    feats = backbone.forward(features, mode="eval")
    return softmax(classifier.forward(feats, mode="eval"))


def _predicted_groups(probs, data, ground_truth_ok, group_by):
    if group_by == "true":
        return true_class_indices(data, ground_truth_ok=ground_truth_ok)
    predicted = probs.argmax(axis=1)
    return {c: np.flatnonzero(predicted == c) for c in range(probs.shape[1])}


def entropy_select(
    backbone: Network,
    classifier: Network,
    data: UnlabeledDataset,
    k: int,
    group_by: str = "predicted",
    ground_truth_ok: bool = False,
) -> SupportSet:
    """Per class, the K samples with the highest prediction entropy."""
    probs = _eval_probabilities(backbone, classifier, data.features)
    groups = _predicted_groups(probs, data, ground_truth_ok, group_by)
    scores = shannon_entropy(probs)
    entries = _top_k_per_group(groups, scores, k)
    return SupportSet(
        entries, k, probs.shape[1], 0, selector="entropy", mode=group_by
    )


def mc_dropout_select(
    backbone: Network,
    classifier: Network,
    data: UnlabeledDataset,
    k: int,
    passes: int = 10,
    dropout_probability: float = 0.5,
    seed: int = 0,
    group_by: str = "predicted",
    ground_truth_ok: bool = False,
) -> SupportSet:
    """Average entropy over stochastic passes with dropout on the features.

    The dropout layer sits at the backbone output; each pass draws a fresh
    mask from the run seed. Grouping uses the deterministic (dropout-free)
    prediction, so zero dropout with one pass reduces exactly to
    ``entropy_select``.
    """
    if passes < 1:
        raise ValidationError("passes must be >= 1")
    clean_probs = _eval_probabilities(backbone, classifier, data.features)
    groups = _predicted_groups(clean_probs, data, ground_truth_ok, group_by)

    feats = backbone.forward(data.features, mode="eval")
    dropout = DropoutLayer(dropout_probability, seed=seed)
    scores = np.zeros(len(data))
    for _ in range(passes):
        noisy = dropout.forward(feats, "train", update_stats=False, cache=False)
        probs = softmax(classifier.forward(noisy, mode="eval"))
        scores += shannon_entropy(probs)
    scores /= passes
    entries = _top_k_per_group(groups, scores, k)
    return SupportSet(
        entries, k, clean_probs.shape[1], seed, selector="mc_dropout", mode=group_by
    )
