"""Shared test utilities: finite differences and tiny network builders."""

import numpy as np

from supportselect.nncore import (
    BatchNormLayer,
    DenseLayer,
    Network,
    ReluLayer,
)


def finite_difference_grads(loss_fn, arrays, h=1e-4):
    """Central-difference gradient of ``loss_fn()`` w.r.t. each array.

    ``loss_fn`` must read the arrays in place (they are mutated and
    restored entry by entry).
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    """Elementwise |a - n| / max(|a|, |n|, floor), maximized."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def random_small_net(rng, in_width=3, with_bn=True):
    """A 2-3 hidden-layer net with < 32 parameters for gradient checks."""
    mid = int(rng.integers(2, 4))
    out = int(rng.integers(1, 3))
    layers = [DenseLayer(in_width, mid, rng)]
    if with_bn:
        layers.append(BatchNormLayer(mid))
    layers.append(ReluLayer())
    layers.append(DenseLayer(mid, out, rng))
    return Network(layers)
