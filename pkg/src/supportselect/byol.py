"""Self-supervised feature adaptation of the source backbone on target data.

An online branch (backbone copy + projection head + predictor) regresses the
projection produced by a slow-moving target branch under two independent
augmentations of the same batch. After each optimizer step the target branch
parameters move toward the online ones by exponential moving average. The
trained online backbone and projection head are kept; the predictor is
dropped.

Augmentations are the vector-space analogue of image augmentation: per-sample
uniform scaling, per-coordinate Bernoulli masking, and additive Gaussian
noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ValidationError
from .nncore import Adam, BatchNormLayer, DenseLayer, Network, ReluLayer

NORM_FLOOR = 1e-12  # rows with norm below this are floored and counted


@dataclass(frozen=True)
class AugmentSpec:
    """Two independent draws of this spec define the two views of a batch."""

    noise_std: float = 0.1
    scale_range: tuple = (0.8, 1.25)
    mask_probability: float = 0.1

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValidationError("scale_range must satisfy 0 < lo <= hi")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be non-negative")
        if not 0 <= self.mask_probability < 1:
            raise ValidationError("mask_probability must be in [0, 1)")


@dataclass(frozen=True)
class ByolConfig:
    projection_dim: int = 8
    predictor_hidden: int = 16
    ema_decay: float = 0.99
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    augment: AugmentSpec | None = None  # None: noise_std = 0.1 * feature std
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.ema_decay < 1:
            raise ValidationError("ema_decay must be in (0, 1)")
        if self.projection_dim < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("bad byol config")


@dataclass
class ByolResult:
    backbone: Network  # f', ready for feature extraction
    projector: Network  # q, used by the clustering stage
    epoch_losses: list = field(default_factory=list)
    batch_ordering_losses: list = field(default_factory=list)  # (loss12, loss21) pairs
    zero_norm_rows: int = 0


def augment(batch, spec: AugmentSpec, seed):
    """One stochastic view: mask coordinates, scale per sample, add noise.

    ``seed`` may be an integer or a ``numpy.random.Generator``; identical
    seeds give identical views.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = np.asarray(batch, dtype=float)
    mask = rng.random(x.shape) >= spec.mask_probability
    lo, hi = spec.scale_range
    scales = rng.uniform(lo, hi, size=(x.shape[0], 1))
    view = x * mask * scales
    if spec.noise_std > 0:
        view = view + rng.normal(0.0, spec.noise_std, size=x.shape)
    return view


def _normalized(rows):
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    floored = int((norms < NORM_FLOOR).sum())
    return rows / np.maximum(norms, NORM_FLOOR), floored


def byol_loss(online_prediction, target_projection):
    """Mean over rows of ``2 - 2 cos(prediction, projection)``; range [0, 4]."""
    loss, _, floored = _byol_loss_grad(online_prediction, target_projection)
    return loss


def _byol_loss_grad(pred, target):
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValidationError("prediction and projection must share a shape")
    u, floored_p = _normalized(pred)
    v, floored_t = _normalized(target)
    cos = (u * v).sum(axis=1)
    loss = float(np.mean(2.0 - 2.0 * cos))
    # d/dp of -2 cos = -2 (v - cos u) / |p|, averaged over the batch
    norms = np.maximum(np.linalg.norm(pred, axis=1, keepdims=True), NORM_FLOOR)
    grad = -2.0 * (v - cos[:, None] * u) / norms / pred.shape[0]
    return loss, grad, floored_p + floored_t


def make_projection_head(feature_width, projection_dim, rng):
    """Two dense layers with batch-norm and ReLU in between; output width d."""
    hidden = 2 * projection_dim
    return Network(
        [
            DenseLayer(feature_width, hidden, rng),
            BatchNormLayer(hidden),
            ReluLayer(),
            DenseLayer(hidden, projection_dim, rng),
        ]
    )


def make_predictor(projection_dim, hidden, rng):
    return Network(
        [
            DenseLayer(projection_dim, hidden, rng),
            BatchNormLayer(hidden),
            ReluLayer(),
            DenseLayer(hidden, projection_dim, rng),
        ]
    )


@dataclass
class ByolState:
    online_backbone: Network
    online_projector: Network
    online_predictor: Network
    target_backbone: Network
    target_projector: Network

    @classmethod
    def initialize(cls, backbone: Network, cfg: ByolConfig, rng):
        feature_width = backbone.output_width
        if cfg.projection_dim >= feature_width:
            raise ValidationError(
                f"projection_dim {cfg.projection_dim} must be smaller than "
                f"the backbone feature width {feature_width}"
            )
        online_backbone = backbone.clone()
        online_projector = make_projection_head(feature_width, cfg.projection_dim, rng)
        online_predictor = make_predictor(cfg.projection_dim, cfg.predictor_hidden, rng)
        target_backbone = online_backbone.clone()
        target_projector = online_projector.clone()
        target_backbone.set_trainable(False)
        target_projector.set_trainable(False)
        return cls(
            online_backbone,
            online_projector,
            online_predictor,
            target_backbone,
            target_projector,
        )

    def online_parameters(self):
        return (
            self.online_backbone.parameters()
            + self.online_projector.parameters()
            + self.online_predictor.parameters()
        )

    def ema_update(self, decay):
        """target <- decay * target + (1 - decay) * online, parameter by parameter."""
        pairs = [
            (self.target_backbone, self.online_backbone),
            (self.target_projector, self.online_projector),
        ]
        for target_net, online_net in pairs:
            for (_, pt), (_, po) in zip(
                target_net.parameters(trainable_only=False),
                online_net.parameters(trainable_only=False),
            ):
                pt.value *= decay
                pt.value += (1.0 - decay) * po.value


def _resolve_augment(cfg, features):
    if cfg.augment is not None:
        return cfg.augment
    return AugmentSpec(noise_std=0.1 * float(features.std()))


def _online_forward_backward(state, view, target_proj, weight):
    """Forward one view through the online branch and backpropagate its share."""
    feats = state.online_backbone.forward(view, mode="train")
    proj = state.online_projector.forward(feats, mode="train")
    pred = state.online_predictor.forward(proj, mode="train")
    loss, dpred, floored = _byol_loss_grad(pred, target_proj)
    dproj = state.online_predictor.backward(weight * dpred)
    dfeats = state.online_projector.backward(dproj)
    state.online_backbone.backward(dfeats)
    return loss, floored


def _target_projection(state, view):
    feats = state.target_backbone.forward(view, mode="train", update_stats=False, cache=False)
    return state.target_projector.forward(feats, mode="train", update_stats=False, cache=False)


def train_byol(backbone: Network, data, cfg: ByolConfig):
    """Adapt ``backbone`` on unlabeled target features; returns a ByolResult.

    Each step draws two views of the batch, symmetrizes the regression loss
    over both view orderings, updates the online branch with Adam, then moves
    the target branch by EMA. With ``epochs == 0`` the returned backbone and
    projector equal their initialization.
    """
    features = np.asarray(data.features, dtype=float)
    if backbone.input_width is not None and features.shape[1] != backbone.input_width:
        raise ValidationError("backbone input width does not match data features")
    root = np.random.SeedSequence([cfg.seed, 101])
    init_rng, order_rng, view_rng = (
        np.random.default_rng(s) for s in root.spawn(3)
    )
    state = ByolState.initialize(backbone, cfg, init_rng)
    result = ByolResult(state.online_backbone, state.online_projector)
    optimizer = Adam(cfg.learning_rate)
    spec = _resolve_augment(cfg, features)
    params = state.online_parameters()

    n = features.shape[0]
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, cfg.batch_size):
            batch = features[order[start : start + cfg.batch_size]]
            if batch.shape[0] < 2:
                continue  # batch statistics need at least two samples
            view1 = augment(batch, spec, view_rng)
            view2 = augment(batch, spec, view_rng)
            t1 = _target_projection(state, view1)
            t2 = _target_projection(state, view2)
            loss12, fl1 = _online_forward_backward(state, view1, t2, 0.5)
            loss21, fl2 = _online_forward_backward(state, view2, t1, 0.5)
            result.zero_norm_rows += fl1 + fl2
            total = 0.5 * (loss12 + loss21)
            if not np.isfinite(total):
                raise NumericError(
                    f"non-finite self-supervision loss at epoch {epoch}; "
                    f"reduce learning_rate (currently {cfg.learning_rate})"
                )
            result.batch_ordering_losses.append((loss12, loss21))
            epoch_losses.append(total)
            optimizer.step([p for _, p in params])
            state.ema_update(cfg.ema_decay)
        if epoch_losses:
            result.epoch_losses.append(float(np.mean(epoch_losses)))
    return result
