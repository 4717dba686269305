"""Tests for the dense-network substrate."""

import math

import numpy as np
import pytest
from helpers import finite_difference_grads, max_relative_error, random_small_net

from supportselect.errors import (
    NumericError,
    ProtocolError,
    ShapeError,
    ValidationError,
)
from supportselect.nncore import (
    Adam,
    BatchNormLayer,
    DenseLayer,
    DropoutLayer,
    Network,
    ReluLayer,
    SgdMomentum,
    cross_entropy,
    one_hot,
    softmax,
    softmax_cross_entropy_with_grad,
)


# ---------------------------------------------------------------- forward


def test_batchnorm_train_normalizes_two_point_batch():
    net = Network([BatchNormLayer(1)])
    out = net.forward(np.array([[1.0], [3.0]]), mode="train")
    # mean 2, population variance 1, epsilon 1e-5
    expected = (np.array([[1.0], [3.0]]) - 2.0) / math.sqrt(1.0 + 1e-5)
    assert np.allclose(out, expected)
    assert np.allclose(out.ravel(), [-1.0, 1.0], atol=1e-4)


def test_batchnorm_constant_batch_maps_to_beta():
    net = Network([BatchNormLayer(1)])
    out = net.forward(np.array([[5.0], [5.0]]), mode="train")
    assert np.allclose(out, 0.0)


def test_dropout_eval_is_identity():
    layer = DropoutLayer(0.5, seed=1)
    x = np.random.default_rng(0).normal(size=(4, 3))
    out = Network([layer]).forward(x, mode="eval")
    assert np.array_equal(out, x)


def test_forward_rejects_bad_shapes_and_nonfinite():
    net = Network([DenseLayer(3, 2, np.random.default_rng(0))])
    with pytest.raises(ShapeError):
        net.forward(np.zeros((2, 4)))
    with pytest.raises(NumericError):
        net.forward(np.array([[1.0, np.nan, 0.0]]))
    with pytest.raises(ShapeError):
        net.forward(np.zeros(3))


def test_adjacent_width_mismatch_rejected_at_construction():
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeError):
        Network([DenseLayer(3, 2, rng), DenseLayer(3, 1, rng)])
    with pytest.raises(ShapeError):
        Network([DenseLayer(3, 2, rng), BatchNormLayer(5)])


def test_empty_network_is_identity():
    net = Network([])
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(net.forward(x, mode="eval"), x)


def test_batchnorm_running_stats_update_in_train_only():
    layer = BatchNormLayer(2, momentum=0.1)
    net = Network([layer])
    x = np.array([[1.0, 2.0], [3.0, 6.0]])
    net.forward(x, mode="train")
    assert np.allclose(layer.running_mean, 0.9 * 0.0 + 0.1 * np.array([2.0, 4.0]))
    assert np.allclose(layer.running_var, 0.9 * 1.0 + 0.1 * np.array([1.0, 4.0]))
    frozen_mean = layer.running_mean.copy()
    frozen_var = layer.running_var.copy()
    for _ in range(5):
        net.forward(x, mode="eval")
    assert np.array_equal(layer.running_mean, frozen_mean)
    assert np.array_equal(layer.running_var, frozen_var)


def test_batchnorm_normalized_output_has_zero_mean_unit_variance():
    rng = np.random.default_rng(7)
    for _ in range(10):
        width = int(rng.integers(1, 6))
        n = int(rng.integers(2, 40))
        x = rng.normal(loc=rng.normal(), size=(n, width))
        # non-degenerate: batch variance >= 1 so epsilon stays negligible
        x = (x - x.mean(axis=0)) / x.std(axis=0) * (1.0 + rng.random()) + rng.normal()
        out = Network([BatchNormLayer(width)]).forward(x, mode="train")
        assert np.abs(out.mean(axis=0)).max() < 1e-6
        assert np.abs(out.var(axis=0) - 1.0).max() < 1e-5


# ---------------------------------------------------------------- backward


def test_dense_scalar_backward_matches_hand_derivative():
    rng = np.random.default_rng(0)
    layer = DenseLayer(1, 1, rng)
    layer.weight.value[:] = 2.0
    layer.bias.value[:] = 0.0
    net = Network([layer])
    net.forward(np.array([[3.0]]), mode="train")
    dx = net.backward(np.array([[1.0]]))
    assert layer.weight.grad[0, 0] == pytest.approx(3.0)
    assert dx[0, 0] == pytest.approx(2.0)


def test_frozen_layer_gets_no_gradient_slots():
    rng = np.random.default_rng(1)
    frozen = DenseLayer(2, 2, rng, trainable=False)
    head = DenseLayer(2, 1, rng)
    net = Network([frozen, ReluLayer(), head])
    net.forward(rng.normal(size=(4, 2)), mode="train")
    net.backward(np.ones((4, 1)))
    assert frozen.weight.grad is None and frozen.bias.grad is None
    assert head.weight.grad is not None
    assert [name for name, _ in net.parameters()] == [
        "layer2.weight",
        "layer2.bias",
    ]


def test_backward_without_forward_is_a_protocol_error():
    net = Network([DenseLayer(2, 2, np.random.default_rng(0))])
    with pytest.raises(ProtocolError):
        net.backward(np.ones((1, 2)))
    net.forward(np.ones((1, 2)), mode="eval")  # eval passes do not cache
    with pytest.raises(ProtocolError):
        net.backward(np.ones((1, 2)))


def test_gradients_match_finite_differences_on_random_nets():
    rng = np.random.default_rng(42)
    for trial in range(5):
        net = random_small_net(rng)
        x = rng.normal(size=(6, 3))
        direction = rng.normal(size=(6, net.layers[-1].out_width))

        def loss():
            return float((net.forward(x, mode="train", update_stats=False) * direction).sum())

        loss()
        net.backward(direction)
        analytic = [p.grad for _, p in net.parameters()]
        numeric = finite_difference_grads(loss, [p.value for _, p in net.parameters()])
        assert max_relative_error(analytic, numeric) < 1e-4
        net.zero_grads()


def test_gradient_accumulates_across_backward_calls():
    rng = np.random.default_rng(3)
    layer = DenseLayer(2, 1, rng)
    net = Network([layer])
    x = rng.normal(size=(3, 2))
    net.forward(x, mode="train")
    net.backward(np.ones((3, 1)))
    once = layer.weight.grad.copy()
    net.forward(x, mode="train")
    net.backward(np.ones((3, 1)))
    assert np.allclose(layer.weight.grad, 2.0 * once)


# ---------------------------------------------------------------- losses


def test_softmax_symmetry_and_overflow():
    assert np.allclose(softmax(np.array([[0.0, 0.0]])), [[0.5, 0.5]])
    big = softmax(np.array([[1000.0, 0.0]]))
    assert np.isfinite(big).all()
    assert np.allclose(big, [[1.0, 0.0]], atol=1e-12)


def test_softmax_matches_direct_formula():
    row = np.array([[1.0, 2.0, 3.0]])
    expected = np.exp(row) / np.exp(row).sum()
    assert np.allclose(softmax(row), expected, atol=1e-12)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(5)
    probs = softmax(rng.normal(scale=10.0, size=(50, 7)))
    assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-9
    assert (probs >= 0.0).all()


def test_cross_entropy_examples():
    perfect = one_hot(np.array([0, 1]), 2)
    assert cross_entropy(perfect, np.array([0, 1])) == pytest.approx(0.0, abs=1e-9)
    uniform = np.full((4, 2), 0.5)
    assert cross_entropy(uniform, np.zeros(4, dtype=int)) == pytest.approx(math.log(2.0))


def test_cross_entropy_matches_per_row_oracle():
    rng = np.random.default_rng(11)
    probs = softmax(rng.normal(size=(9, 4)))
    labels = rng.integers(0, 4, size=9)
    expected = sum(-math.log(probs[i, labels[i]]) for i in range(9)) / 9.0
    assert cross_entropy(probs, labels) == pytest.approx(expected, rel=1e-12)


def test_cross_entropy_error_cases():
    probs = np.full((2, 2), 0.5)
    with pytest.raises(IndexError):
        cross_entropy(probs, np.array([0, 2]))
    with pytest.raises(ValidationError):
        cross_entropy(np.array([[0.2, 0.2]]), np.array([0]))
    # zero probability is clamped, not infinite
    val = cross_entropy(one_hot(np.array([1]), 2), np.array([0]))
    assert math.isfinite(val) and val == pytest.approx(-math.log(1e-12))


def test_fused_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(13)
    logits = rng.normal(size=(5, 3))
    labels = rng.integers(0, 3, size=5)

    def loss():
        return softmax_cross_entropy_with_grad(logits, labels)[0]

    _, grad = softmax_cross_entropy_with_grad(logits, labels)
    numeric = finite_difference_grads(loss, [logits])
    assert max_relative_error([grad], numeric) < 1e-6


# ---------------------------------------------------------------- optimizers


def test_sgd_single_step():
    p = DenseLayer(1, 1, np.random.default_rng(0))
    p.weight.value[:] = 1.0
    p.weight.grad = np.array([[1.0]])
    p.bias.grad = np.zeros(1)
    SgdMomentum(0.1).step(Network([p]))
    assert p.weight.value[0, 0] == pytest.approx(0.9)
    assert p.weight.grad is None


def test_adam_first_step_matches_hand_recurrence():
    layer = DenseLayer(1, 1, np.random.default_rng(0))
    layer.weight.value[:] = 1.0
    layer.bias.value[:] = 0.0
    g = 0.5
    layer.weight.grad = np.array([[g]])
    layer.bias.grad = np.zeros(1)
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    Adam(lr, b1, b2, eps).step(Network([layer]))
    m_hat = ((1 - b1) * g) / (1 - b1)
    v_hat = ((1 - b2) * g * g) / (1 - b2)
    expected = 1.0 - lr * m_hat / (math.sqrt(v_hat) + eps)
    assert layer.weight.value[0, 0] == pytest.approx(expected, rel=1e-12)


def test_zero_gradient_leaves_parameters_unchanged():
    layer = DenseLayer(2, 2, np.random.default_rng(0))
    before = layer.weight.value.copy()
    layer.weight.grad = np.zeros((2, 2))
    layer.bias.grad = np.zeros(2)
    Adam(0.1).step(Network([layer]))
    assert np.array_equal(layer.weight.value, before)


def test_step_with_missing_gradients_is_a_protocol_error():
    net = Network([DenseLayer(2, 2, np.random.default_rng(0))])
    with pytest.raises(ProtocolError):
        SgdMomentum(0.1).step(net)


# ---------------------------------------------------------------- determinism


def _train_briefly(seed):
    rng = np.random.default_rng(seed)
    net = Network(
        [
            DenseLayer(3, 4, rng),
            BatchNormLayer(4),
            ReluLayer(),
            DenseLayer(4, 2, rng),
        ]
    )
    opt = Adam(1e-2)
    data_rng = np.random.default_rng(seed + 1)
    x = data_rng.normal(size=(16, 3))
    y = data_rng.integers(0, 2, size=16)
    for _ in range(10):
        logits = net.forward(x, mode="train")
        _, grad = softmax_cross_entropy_with_grad(logits, y)
        net.backward(grad)
        opt.step(net)
    return net


def test_training_is_bit_deterministic_in_seed():
    a = _train_briefly(123)
    b = _train_briefly(123)
    for (_, pa), (_, pb) in zip(a.parameters(False), b.parameters(False)):
        assert np.array_equal(pa.value, pb.value)
    for la, lb in zip(a.layers, b.layers):
        if isinstance(la, BatchNormLayer):
            assert np.array_equal(la.running_mean, lb.running_mean)
            assert np.array_equal(la.running_var, lb.running_var)
