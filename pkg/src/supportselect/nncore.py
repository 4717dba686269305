"""Minimal dense-network substrate with reverse-mode gradients.

Everything here operates on 2-D float64 numpy arrays (rows = samples). The
building blocks are deliberately small:

- ``Param``: an array with a gradient slot.
- Layers: ``DenseLayer``, ``BatchNormLayer``, ``DropoutLayer``, ``ReluLayer``.
- ``Network``: an ordered layer stack with ``forward`` / ``backward``.
- Losses: ``softmax``, ``cross_entropy`` and a fused gradient helper.
- Optimizers: ``SgdMomentum`` and ``Adam``.

Backward passes accumulate into parameter gradient slots, so several
forward/backward pairs can contribute to one optimizer step. ``step`` clears
the slots. All randomness comes from explicitly passed ``numpy.random``
generators; there is no global seeding anywhere.
"""

from __future__ import annotations

import copy

import numpy as np

from .errors import NumericError, ProtocolError, ShapeError, ValidationError

PROB_FLOOR = 1e-12  # cross-entropy clamps p(label) at this floor


def as_batch(x, name="batch"):
    """Coerce to a finite 2-D float64 array or raise."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NumericError(f"{name} contains non-finite values")
    return arr


class Param:
    """A dense parameter array plus an optional accumulated gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.asarray(value, dtype=float)
        self.grad = None

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    @property
    def shape(self):
        return self.value.shape


class DenseLayer:
    """Fully connected layer ``y = x @ W + b`` with He-scaled init."""

    def __init__(self, in_width, out_width, rng, trainable=True):
        scale = np.sqrt(2.0 / in_width)
        self.weight = Param(rng.normal(0.0, scale, size=(in_width, out_width)))
        self.bias = Param(np.zeros(out_width))
        self.trainable = trainable
        self._cache = None

    @property
    def in_width(self):
        return self.weight.shape[0]

    @property
    def out_width(self):
        return self.weight.shape[1]

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x, mode, update_stats, cache):
        if cache:
            self._cache = x
        return x @ self.weight.value + self.bias.value

    def backward(self, dy):
        x = self._cache
        if self.trainable:
            self.weight.accumulate(x.T @ dy)
            self.bias.accumulate(dy.sum(axis=0))
        return dy @ self.weight.value.T


class ReluLayer:
    """Elementwise ``max(0, x)``."""

    trainable = False

    def __init__(self):
        self._cache = None

    def params(self):
        return []

    def forward(self, x, mode, update_stats, cache):
        if cache:
            self._cache = x > 0
        return np.maximum(x, 0.0)

    def backward(self, dy):
        return dy * self._cache


class BatchNormLayer:
    """Per-feature batch normalization with running statistics.

    Train mode normalizes with batch statistics (population variance) and,
    unless told otherwise, folds them into the running estimates with
    ``new = (1 - momentum) * old + momentum * batch``. Eval mode normalizes
    with the running statistics and never mutates them.
    """

    def __init__(self, width, momentum=0.1, epsilon=1e-5, trainable=True):
        if not 0.0 < momentum <= 1.0:
            raise ValidationError(f"momentum must be in (0, 1], got {momentum}")
        if epsilon <= 0.0:
            raise ValidationError(f"epsilon must be positive, got {epsilon}")
        self.width = width
        self.momentum = momentum
        self.epsilon = epsilon
        self.gamma = Param(np.ones(width))
        self.beta = Param(np.zeros(width))
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self.trainable = trainable
        self._cache = None

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def forward(self, x, mode, update_stats, cache):
        if mode == "train":
            mean = x.mean(axis=0)
            var = x.var(axis=0)  # population estimator, matches running stats
            if update_stats:
                m = self.momentum
                self.running_mean = (1.0 - m) * self.running_mean + m * mean
                self.running_var = (1.0 - m) * self.running_var + m * var
        else:
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        x_hat = (x - mean) * inv_std
        if cache:
            self._cache = (x_hat, inv_std, mode)
        return self.gamma.value * x_hat + self.beta.value

    def backward(self, dy):
        x_hat, inv_std, mode = self._cache
        if self.trainable:
            self.gamma.accumulate((dy * x_hat).sum(axis=0))
            self.beta.accumulate(dy.sum(axis=0))
        g = dy * self.gamma.value
        if mode != "train":
            # running statistics are constants w.r.t. the batch
            return g * inv_std
        n = dy.shape[0]
        return (inv_std / n) * (
            n * g - g.sum(axis=0) - x_hat * (g * x_hat).sum(axis=0)
        )


class DropoutLayer:
    """Inverted dropout; identity in eval mode.

    Masks are drawn from an internal generator so repeated runs with the same
    ``reseed`` produce identical sequences.
    """

    trainable = False

    def __init__(self, drop_probability, seed=0):
        if not 0.0 <= drop_probability < 1.0:
            raise ValidationError(
                f"drop_probability must be in [0, 1), got {drop_probability}"
            )
        self.drop_probability = drop_probability
        self._rng = np.random.default_rng(seed)
        self._cache = None

    def reseed(self, seed):
        self._rng = np.random.default_rng(seed)

    def params(self):
        return []

    def forward(self, x, mode, update_stats, cache):
        if mode != "train" or self.drop_probability == 0.0:
            if cache:
                self._cache = None
            return x
        keep = 1.0 - self.drop_probability
        mask = (self._rng.random(x.shape) < keep) / keep
        if cache:
            self._cache = mask
        return x * mask

    def backward(self, dy):
        if self._cache is None:
            return dy
        return dy * self._cache


class Network:
    """An ordered stack of layers acting on row batches.

    An empty layer list is the identity network (used as a stand-in
    projection head when no trained projector exists).
    """

    def __init__(self, layers):
        self.layers = list(layers)
        self._validate_widths()
        self._ready_for_backward = False
        self._last_output_shape = None

    def _validate_widths(self):
        width = None
        first = None
        for i, layer in enumerate(self.layers):
            if isinstance(layer, DenseLayer):
                if width is not None and layer.in_width != width:
                    raise ShapeError(
                        f"layer {i}: expects width {layer.in_width}, "
                        f"previous layer produces {width}"
                    )
                if first is None:
                    first = layer.in_width
                width = layer.out_width
            elif isinstance(layer, BatchNormLayer):
                if width is not None and layer.width != width:
                    raise ShapeError(
                        f"layer {i}: batchnorm width {layer.width} "
                        f"does not match incoming width {width}"
                    )
                if first is None:
                    first = layer.width
                width = layer.width
        self.input_width = first  # None means any width (identity-like)
        self.output_width = width

    def forward(self, x, mode="train", update_stats=None, cache=None):
        """Run the stack; ``mode`` is ``train`` or ``eval``.

        ``update_stats`` defaults to True in train mode; pass False to use
        batch statistics without touching running estimates. ``cache``
        defaults to True in train mode and controls whether intermediates
        are recorded for ``backward``.
        """
        if mode not in ("train", "eval"):
            raise ValidationError(f"unknown mode {mode!r}")
        x = as_batch(x, "input")
        if self.input_width is not None and x.shape[1] != self.input_width:
            raise ShapeError(
                f"input has {x.shape[1]} columns, network expects {self.input_width}"
            )
        if update_stats is None:
            update_stats = mode == "train"
        if cache is None:
            cache = mode == "train"
        for layer in self.layers:
            x = layer.forward(x, mode, update_stats, cache)
        self._ready_for_backward = cache
        self._last_output_shape = x.shape
        return x

    def backward(self, upstream):
        """Backpropagate an upstream gradient; returns the input gradient.

        Parameter gradients accumulate on trainable layers. Requires a
        preceding cached (train-mode) forward pass.
        """
        if not self._ready_for_backward:
            raise ProtocolError("backward called without a cached forward pass")
        g = np.asarray(upstream, dtype=float)
        if g.shape != self._last_output_shape:
            raise ShapeError(
                f"upstream gradient shape {g.shape} does not match "
                f"forward output shape {self._last_output_shape}"
            )
        for layer in reversed(self.layers):
            g = layer.backward(g)
        self._ready_for_backward = False
        return g

    def parameters(self, trainable_only=True):
        """List of (name, Param) pairs in deterministic layer order."""
        out = []
        for i, layer in enumerate(self.layers):
            if trainable_only and not layer.trainable:
                continue
            for name, p in layer.params():
                out.append((f"layer{i}.{name}", p))
        return out

    def zero_grads(self):
        for _, p in self.parameters(trainable_only=False):
            p.grad = None

    def set_trainable(self, flag):
        for layer in self.layers:
            if layer.params():
                layer.trainable = flag

    def clone(self):
        """Deep copy: parameters, running statistics and caches included."""
        return copy.deepcopy(self)


def softmax(logits):
    """Row-wise softmax with max-shift for overflow safety."""
    z = as_batch(logits, "logits")
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(probabilities, labels):
    """Mean negative log-likelihood of integer labels under probability rows.

    Probabilities below ``PROB_FLOOR`` are clamped so a confidently wrong row
    yields a large finite loss instead of infinity.
    """
    p = as_batch(probabilities, "probabilities")
    row_sums = p.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6) or np.any(p < -1e-12):
        raise ValidationError("rows of probabilities must be distributions")
    y = np.asarray(labels)
    if y.shape != (p.shape[0],):
        raise ShapeError(f"labels shape {y.shape} does not match batch {p.shape[0]}")
    if np.any(y < 0) or np.any(y >= p.shape[1]):
        raise IndexError("label out of range [0, C)")
    picked = np.maximum(p[np.arange(p.shape[0]), y], PROB_FLOOR)
    return float(-np.log(picked).mean())


def softmax_cross_entropy_with_grad(logits, labels):
    """Fused softmax + cross-entropy; returns (loss, dloss/dlogits)."""
    probs = softmax(logits)
    loss = cross_entropy(probs, labels)
    n = probs.shape[0]
    grad = probs.copy()
    grad[np.arange(n), np.asarray(labels)] -= 1.0
    return loss, grad / n


def one_hot(labels, num_classes):
    y = np.asarray(labels)
    out = np.zeros((y.shape[0], num_classes))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def _param_list(target):
    if isinstance(target, Network):
        return [p for _, p in target.parameters(trainable_only=True)]
    return list(target)


class SgdMomentum:
    """Plain SGD with optional heavy-ball momentum."""

    kind = "sgd_momentum"

    def __init__(self, learning_rate, momentum=0.0):
        if learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self._velocity = None

    def step(self, target):
        params = _param_list(target)
        if self._velocity is None:
            self._velocity = [np.zeros(p.shape) for p in params]
        for p, v in zip(params, self._velocity):
            if p.grad is None:
                raise ProtocolError("step called with missing gradients")
            v *= self.momentum
            v += p.grad
            p.value -= self.learning_rate * v
            p.grad = None
        return target


class Adam:
    """Adam with bias correction (standard recurrence)."""

    kind = "adam"

    def __init__(self, learning_rate, beta1=0.9, beta2=0.999, epsilon=1e-8):
        if learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self._m = None
        self._v = None
        self._t = 0

    def step(self, target):
        params = _param_list(target)
        if self._m is None:
            self._m = [np.zeros(p.shape) for p in params]
            self._v = [np.zeros(p.shape) for p in params]
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self._t
        bc2 = 1.0 - b2**self._t
        for p, m, v in zip(params, self._m, self._v):
            if p.grad is None:
                raise ProtocolError("step called with missing gradients")
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad**2
            p.value -= self.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)
            p.grad = None
        return target
