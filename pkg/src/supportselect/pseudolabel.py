"""Pseudo-labels for the unlabeled target set.

The default route averages the source classifier's softmax outputs over the
features of the original backbone and the self-supervised one, then takes
the row-wise argmax (ties to the lower class index). Single-backbone variants
exist for ablation runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domains import UnlabeledDataset, evaluation_labels
from .errors import ShapeError, ValidationError
from .nncore import Network, softmax


@dataclass
class PseudoLabelTable:
    """Per-sample class guesses plus the soft distribution behind them.

    ``per_class_indices`` partitions ``range(M)``; classes that attracted no
    samples map to empty index arrays.
    """

    labels: np.ndarray  # (M,) int, argmax of mean_probabilities
    mean_probabilities: np.ndarray  # (M, C), rows sum to 1
    per_class_indices: dict

    @property
    def num_classes(self):
        return self.mean_probabilities.shape[1]

    def __len__(self):
        return self.labels.shape[0]


def _class_probabilities(backbone: Network, classifier: Network, features):
    feats = backbone.forward(features, mode="eval")
    logits = classifier.forward(feats, mode="eval")
    return softmax(logits)


def _build_table(mean_probs):
    labels = mean_probs.argmax(axis=1)  # argmax returns the first (lowest) maximizer
    per_class = {
        c: np.flatnonzero(labels == c) for c in range(mean_probs.shape[1])
    }
    return PseudoLabelTable(labels, mean_probs, per_class)


def ensemble_pseudo_labels(
    f: Network, f_prime: Network, g: Network, data: UnlabeledDataset
) -> PseudoLabelTable:
    """Average the classifier's softmax over both backbones' features."""
    p1 = _class_probabilities(f, g, data.features)
    p2 = _class_probabilities(f_prime, g, data.features)
    if p1.shape != p2.shape:
        raise ShapeError("the two backbones feed the classifier inconsistently")
    return _build_table(0.5 * (p1 + p2))


def single_backbone_pseudo_labels(
    fx: Network, g: Network, data: UnlabeledDataset
) -> PseudoLabelTable:
    """Pseudo-labels from one backbone only (ablation modes)."""
    return _build_table(_class_probabilities(fx, g, data.features))


def pseudo_label_accuracy(table: PseudoLabelTable, data: UnlabeledDataset) -> float:
    """Diagnostic only: fraction of pseudo-labels matching the hidden labels.

    Goes through the evaluation door; never feeds back into selection.
    """
    if len(table) != len(data):
        raise ValidationError("table and dataset disagree on sample count")
    truth = evaluation_labels(data)
    return float((table.labels == truth).mean())
