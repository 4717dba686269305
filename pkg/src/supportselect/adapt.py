"""Adapting a model to the target domain with a labeled support set.

Each batch-norm layer of the adapted backbone is replaced by a mixed-
statistics version: the normalization constants become a learned convex
combination of the statistics the backbone carries (the anchor, frozen) and
statistics of the support set. One scalar logit per layer controls the mean
mix, one controls the variance mix; the affine scale and shift are fine-tuned
alongside. Everything else in the backbone, and the classifier, stays frozen.

For large enough shot counts the classification head is swapped for a
nearest-centroid classifier built from the adapted support features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .domains import UnlabeledDataset, evaluation_labels
from .errors import NumericError, ValidationError
from .nncore import (
    Adam,
    BatchNormLayer,
    Network,
    Param,
    cross_entropy,
    softmax,
    softmax_cross_entropy_with_grad,
)

CENTROID_HEAD_MIN_SHOTS = 5  # nearest-centroid head for K >= 5, else classifier
INIT_MIX_WEIGHT = 0.9  # starting weight on the anchor statistics


@dataclass
class SourceModel:
    """Backbone + classifier trained on the source domain.

    ``bn_snapshot`` freezes the batch-norm state at the end of source
    training so later stages can verify nothing mutated it.
    """

    backbone: Network
    classifier: Network
    bn_snapshot: list = field(default_factory=list)
    train_accuracy: float = float("nan")

    def __post_init__(self):
        if not self.bn_snapshot:
            self.bn_snapshot = snapshot_bn(self.backbone)


def snapshot_bn(net: Network):
    """Copies of (running_mean, running_var, gamma, beta) per BN layer."""
    snap = []
    for layer in net.layers:
        if isinstance(layer, BatchNormLayer):
            snap.append(
                {
                    "running_mean": layer.running_mean.copy(),
                    "running_var": layer.running_var.copy(),
                    "gamma": layer.gamma.value.copy(),
                    "beta": layer.beta.value.copy(),
                }
            )
    return snap


def backbone_matches_snapshot(net: Network, snapshot) -> bool:
    current = snapshot_bn(net)
    if len(current) != len(snapshot):
        return False
    return all(
        np.array_equal(a[k], b[k])
        for a, b in zip(current, snapshot)
        for k in ("running_mean", "running_var", "gamma", "beta")
    )


def compute_support_bn_stats(backbone: Network, support_features):
    """Per-BN-layer (mean, population variance) of the support activations.

    One statistics-collection pass: every BN layer records the batch moments
    of its input, normalizes with them (its own affine parameters applied),
    and feeds the next layer. Running statistics are never touched.
    """
    x = np.asarray(support_features, dtype=float)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValidationError("support must be a non-empty 2-D feature array")
    stats = []
    for layer in backbone.layers:
        if isinstance(layer, BatchNormLayer):
            stats.append((x.mean(axis=0), x.var(axis=0)))
            x = layer.forward(x, "train", update_stats=False, cache=False)
        else:
            x = layer.forward(x, "eval", update_stats=False, cache=False)
    return stats


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


class LccsBn:
    """Batch normalization with learned anchor/support statistic mixing.

    ``anchor_*`` are the frozen statistics the backbone carried into
    adaptation; ``support_*`` are fixed support-set statistics. Forward
    passes mix the anchor with either the current batch moments
    (training, batches of >= 2 rows) or the stored support moments
    (evaluation and tiny batches).
    """

    def __init__(self, anchor_mean, anchor_var, support_mean, support_var, gamma, beta, epsilon):
        logit0 = math.log(INIT_MIX_WEIGHT / (1.0 - INIT_MIX_WEIGHT))
        self.anchor_mean = np.asarray(anchor_mean, dtype=float).copy()
        self.anchor_var = np.asarray(anchor_var, dtype=float).copy()
        self.support_mean = np.asarray(support_mean, dtype=float).copy()
        self.support_var = np.asarray(support_var, dtype=float).copy()
        self.mix_logit_mean = Param(np.array(logit0))
        self.mix_logit_var = Param(np.array(logit0))
        self.gamma = Param(np.asarray(gamma, dtype=float).copy())
        self.beta = Param(np.asarray(beta, dtype=float).copy())
        self.epsilon = epsilon
        self._cache = None

    def params(self):
        return [
            ("mix_logit_mean", self.mix_logit_mean),
            ("mix_logit_var", self.mix_logit_var),
            ("gamma", self.gamma),
            ("beta", self.beta),
        ]

    def mix_weights(self):
        return (
            float(_sigmoid(self.mix_logit_mean.value)),
            float(_sigmoid(self.mix_logit_var.value)),
        )

    def effective_stats(self, side_mean=None, side_var=None):
        """Convex combination of anchor and support-side statistics."""
        if side_mean is None:
            side_mean, side_var = self.support_mean, self.support_var
        w_m, w_v = self.mix_weights()
        mean = w_m * self.anchor_mean + (1.0 - w_m) * side_mean
        var = w_v * self.anchor_var + (1.0 - w_v) * side_var
        return mean, var

    def forward(self, x, use_batch_side, cache):
        batch_side = use_batch_side and x.shape[0] >= 2
        if batch_side:
            side_mean = x.mean(axis=0)
            side_var = x.var(axis=0)
        else:
            side_mean, side_var = self.support_mean, self.support_var
        mean, var = self.effective_stats(side_mean, side_var)
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        x_hat = (x - mean) * inv_std
        if cache:
            self._cache = (x, x_hat, inv_std, side_mean, side_var, batch_side)
        return self.gamma.value * x_hat + self.beta.value

    def backward(self, dy):
        x, x_hat, inv_std, side_mean, side_var, batch_side = self._cache
        n = x.shape[0]
        w_m, w_v = self.mix_weights()
        self.gamma.accumulate((dy * x_hat).sum(axis=0))
        self.beta.accumulate(dy.sum(axis=0))
        g = dy * self.gamma.value

        # loss sensitivity to the effective statistics
        d_eff_mean = -(g.sum(axis=0)) * inv_std
        d_eff_var = -0.5 * inv_std**2 * (g * x_hat).sum(axis=0)

        # scalar mixing logits: eff = w * anchor + (1 - w) * side
        dw_m = float((d_eff_mean * (self.anchor_mean - side_mean)).sum())
        dw_v = float((d_eff_var * (self.anchor_var - side_var)).sum())
        self.mix_logit_mean.accumulate(np.array(dw_m * w_m * (1.0 - w_m)))
        self.mix_logit_var.accumulate(np.array(dw_v * w_v * (1.0 - w_v)))

        if not batch_side:
            return g * inv_std
        # batch moments enter the effective statistics with weight (1 - w)
        a = 1.0 - w_m
        b = 1.0 - w_v
        batch_mean = side_mean
        return inv_std * (
            g
            - (a / n) * g.sum(axis=0)
            - (b / n) * inv_std * (x - batch_mean) * (g * x_hat).sum(axis=0)
        )


@dataclass
class LccsState:
    """The adapted backbone: frozen layers interleaved with LccsBn modules."""

    layers: list
    support_ce_trace: list = field(default_factory=list)
    single_sample_support: bool = False

    def bn_modules(self):
        return [l for l in self.layers if isinstance(l, LccsBn)]

    def parameters(self):
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, LccsBn):
                out.extend((f"lccs{i}.{n}", p) for n, p in layer.params())
        return out

    def forward(self, x, use_batch_side=False, cache=False):
        x = np.asarray(x, dtype=float)
        for layer in self.layers:
            if isinstance(layer, LccsBn):
                x = layer.forward(x, use_batch_side, cache)
            else:
                x = layer.forward(x, "eval", False, cache)
        return x

    def backward(self, upstream):
        g = upstream
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


def build_lccs_state(backbone: Network, support_features) -> LccsState:
    """Clone the backbone, freeze it, and wrap each BN layer in LccsBn.

    The anchor statistics and the affine initialization come from the
    backbone itself; the support statistics from a collection pass.
    """
    stats = compute_support_bn_stats(backbone, support_features)
    clone = backbone.clone()
    clone.set_trainable(False)
    layers = []
    bn_index = 0
    for layer in clone.layers:
        if isinstance(layer, BatchNormLayer):
            mean, var = stats[bn_index]
            layers.append(
                LccsBn(
                    layer.running_mean,
                    layer.running_var,
                    mean,
                    var,
                    layer.gamma.value,
                    layer.beta.value,
                    layer.epsilon,
                )
            )
            bn_index += 1
        else:
            layers.append(layer)
    state = LccsState(layers)
    state.single_sample_support = np.asarray(support_features).shape[0] < 2
    return state


def lccs_adapt(
    backbone: Network,
    classifier: Network,
    support_features,
    support_labels,
    epochs: int = 10,
    learning_rate: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
) -> LccsState:
    """Train the mixing logits and affine parameters on the labeled support.

    Cross-entropy of the frozen classifier over the support set, Adam,
    mini-batches of ``batch_size`` (the whole support in one batch at desk
    scale). ``epochs == 0`` returns the initialized state untouched.
    """
    feats = np.asarray(support_features, dtype=float)
    labels = np.asarray(support_labels, dtype=int)
    if feats.shape[0] != labels.shape[0]:
        raise ValidationError("support features and labels disagree")
    if feats.shape[0] < 1:
        raise ValidationError("support must be non-empty")
    state = build_lccs_state(backbone, feats)
    head = classifier.clone()
    head.set_trainable(False)

    def support_ce():
        out = state.forward(feats, use_batch_side=True, cache=False)
        return cross_entropy(softmax(head.forward(out, mode="eval")), labels)

    state.support_ce_trace.append(support_ce())
    if epochs == 0:
        return state

    params = [p for _, p in state.parameters()]
    optimizer = Adam(learning_rate)
    rng = np.random.default_rng(seed)
    n = feats.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = order[start : start + batch_size]
            out = state.forward(feats[batch], use_batch_side=True, cache=True)
            logits = head.forward(out, mode="eval", cache=True)
            loss, dlogits = softmax_cross_entropy_with_grad(logits, labels[batch])
            if not np.isfinite(loss):
                raise NumericError("non-finite adaptation loss; reduce learning rate")
            dout = head.backward(dlogits)
            state.backward(dout)
            optimizer.step(params)
        state.support_ce_trace.append(support_ce())
    return state


class CentroidClassifier:
    """Nearest-centroid head over adapted features.

    Classes absent from the support set get no centroid and are unreachable;
    they are reported loudly in ``absent_classes``.
    """

    def __init__(self, centroids, present_classes, num_classes):
        self.centroids = np.asarray(centroids, dtype=float)
        self.present_classes = list(present_classes)
        self.num_classes = num_classes
        self.absent_classes = [
            c for c in range(num_classes) if c not in set(present_classes)
        ]

    def predict(self, features):
        diff = features[:, None, :] - self.centroids[None, :, :]
        dists = np.sqrt((diff * diff).sum(axis=2))
        picks = dists.argmin(axis=1)
        return np.asarray([self.present_classes[i] for i in picks], dtype=int)


def build_centroid_classifier(
    state: LccsState, support_features, support_labels, num_classes
) -> CentroidClassifier:
    """Per-class mean of adapted support features."""
    feats = np.asarray(support_features, dtype=float)
    labels = np.asarray(support_labels, dtype=int)
    if feats.shape[0] < 1:
        raise ValidationError("support must be non-empty")
    adapted = state.forward(feats, use_batch_side=False, cache=False)
    present = sorted(int(c) for c in np.unique(labels))
    centroids = np.vstack([adapted[labels == c].mean(axis=0) for c in present])
    return CentroidClassifier(centroids, present, num_classes)


@dataclass
class AdaptedModel:
    """The target-ready model: adapted backbone plus a decision head."""

    state: LccsState
    head_kind: str  # "classifier" | "centroid"
    classifier: Network | None = None
    centroids: CentroidClassifier | None = None

    def predict(self, features):
        adapted = self.state.forward(features, use_batch_side=False, cache=False)
        if self.head_kind == "classifier":
            probs = softmax(self.classifier.forward(adapted, mode="eval"))
            return probs.argmax(axis=1)
        return self.centroids.predict(adapted)


def build_adapted_model(
    state: LccsState,
    classifier: Network,
    support_features,
    support_labels,
    num_classes: int,
    k: int,
) -> AdaptedModel:
    """Head switch rule: nearest-centroid head iff K >= 5."""
    if k >= CENTROID_HEAD_MIN_SHOTS:
        head = build_centroid_classifier(state, support_features, support_labels, num_classes)
        return AdaptedModel(state, "centroid", centroids=head)
    return AdaptedModel(state, "classifier", classifier=classifier)


def evaluate(model, data: UnlabeledDataset, support_indices):
    """Accuracy on the target set minus the support set.

    Uses the evaluation door for the hidden labels; also reports the
    average per-class accuracy.
    """
    support = np.asarray(list(support_indices), dtype=int)
    if support.size and (support.min() < 0 or support.max() >= len(data)):
        raise ValidationError("support indices outside the dataset")
    mask = np.ones(len(data), dtype=bool)
    mask[support] = False
    eval_idx = np.flatnonzero(mask)
    truth = evaluation_labels(data, eval_idx)
    preds = model.predict(data.features[eval_idx])
    correct = preds == truth
    accuracy = float(correct.mean()) if eval_idx.size else float("nan")
    classes = sorted(int(c) for c in np.unique(truth))
    per_class = [float(correct[truth == c].mean()) for c in classes]
    metrics = {
        "accuracy": accuracy,
        "per_class_accuracy": per_class,
        "mean_per_class_accuracy": float(np.mean(per_class)) if per_class else float("nan"),
        "eval_size": int(eval_idx.size),
        "support_size": int(support.size),
    }
    if getattr(model, "head_kind", None) == "centroid" and model.centroids.absent_classes:
        metrics["absent_classes"] = model.centroids.absent_classes
    return metrics
