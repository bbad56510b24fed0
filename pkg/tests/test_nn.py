import numpy as np
import pytest

from leap.errors import NumericalError, ValidationError
from leap.nn import (
    DenseNet,
    Layer,
    adam_init,
    adam_step,
    backward,
    forward,
    grad_check,
    mse_loss,
)


def linear_net(weight, bias=None, rng=None):
    weight = np.asarray(weight, dtype=float)
    bias = np.zeros(weight.shape[1]) if bias is None else np.asarray(bias, dtype=float)
    return DenseNet([Layer(weight, bias, "identity")], rng or np.random.default_rng(0))


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def test_forward_identity_layer_passthrough(rng):
    net = linear_net(np.eye(4))
    batch = rng.standard_normal((6, 4))
    out, _ = forward(net, batch)
    assert np.array_equal(out, batch)


def test_forward_relu():
    net = DenseNet([Layer(np.eye(2), np.zeros(2), "relu")], np.random.default_rng(0))
    out, _ = forward(net, np.array([[-1.0, 2.0]]))
    assert np.array_equal(out, [[0.0, 2.0]])


def test_forward_matches_dense_math_oracle(rng):
    net = DenseNet.build([5, 7, 3], ["relu", "identity"], [0.0, 0.0], rng)
    batch = rng.standard_normal((4, 5))
    out, _ = forward(net, batch)
    w1, b1 = net.layers[0].weight, net.layers[0].bias
    w2, b2 = net.layers[1].weight, net.layers[1].bias
    hidden = np.maximum(batch @ w1 + b1, 0.0)
    assert np.all(np.abs(out - (hidden @ w2 + b2)) < 1e-12)


def test_forward_dimension_mismatch():
    net = linear_net(np.eye(3))
    with pytest.raises(ValidationError):
        forward(net, np.ones((2, 4)))


def test_forward_does_not_mutate_batch(rng):
    net = DenseNet.build([3, 3], ["relu"], [0.5], rng)
    batch = rng.standard_normal((5, 3))
    before = batch.copy()
    forward(net, batch, training=True)
    assert np.array_equal(batch, before)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_backward_zero_loss_grad_gives_zero_grads(rng):
    net = DenseNet.build([4, 6, 2], ["relu", "identity"], [0.0, 0.0], rng)
    out, cache = forward(net, rng.standard_normal((3, 4)))
    grads, dx = backward(net, cache, np.zeros_like(out))
    assert all(np.all(dw == 0) and np.all(db == 0) for dw, db in grads)
    assert np.all(dx == 0)


def test_backward_linear_mse_closed_form(rng):
    net = linear_net(rng.standard_normal((5, 1)))
    x = rng.standard_normal((20, 5))
    y = rng.standard_normal((20, 1))
    out, cache = forward(net, x)
    _, loss_grad = mse_loss(out, y)
    grads, _ = backward(net, cache, loss_grad)
    closed = 2.0 * x.T @ (out - y) / 20
    assert np.all(np.abs(grads[0][0] - closed) < 1e-12)


def test_backward_finite_difference_oracle(rng):
    net = DenseNet.build([6, 5, 4], ["relu", "identity"], [0.0, 0.0], rng)
    batch = rng.standard_normal((7, 6))
    target = rng.standard_normal((7, 4))
    assert grad_check(net, batch, lambda o: mse_loss(o, target)) < 1e-4


def test_backward_stale_cache_errors(rng):
    net = DenseNet.build([3, 2], ["identity"], [0.0], rng)
    out, cache = forward(net, rng.standard_normal((2, 3)))
    grads, _ = backward(net, cache, np.ones_like(out))
    adam_step(net, grads, adam_init(net))
    with pytest.raises(ValidationError, match="stale"):
        backward(net, cache, np.ones_like(out))


# ---------------------------------------------------------------------------
# adam_step
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_parameters(rng):
    net = DenseNet.build([3, 2], ["identity"], [0.0], rng)
    before = net.snapshot()
    grads = [(np.zeros_like(net.layers[0].weight), np.zeros_like(net.layers[0].bias))]
    adam_step(net, grads, adam_init(net))
    assert all(np.array_equal(a, b) for a, b in zip(net.snapshot(), before))


def test_adam_first_step_closed_form(rng):
    net = linear_net(rng.standard_normal((4, 2)))
    before = net.layers[0].weight.copy()
    g = rng.standard_normal((4, 2))
    state = adam_init(net, learning_rate=1e-3, epsilon=1e-8)
    adam_step(net, [(g, np.zeros(2))], state)
    # t=1: m_hat = g, v_hat = g^2 -> delta = -lr * g / (|g| + eps)
    expected = before - 1e-3 * g / (np.abs(g) + 1e-8)
    assert np.all(np.abs(net.layers[0].weight - expected) < 1e-15)
    assert state.step_count == 1


def test_adam_descends_convex_quadratic(rng):
    net = linear_net(rng.standard_normal((3, 1)))
    x = rng.standard_normal((50, 3))
    y = x @ np.array([[1.0], [-2.0], [0.5]])
    state = adam_init(net, learning_rate=1e-2)
    losses = []
    for _ in range(200):
        out, cache = forward(net, x)
        loss, lg = mse_loss(out, y)
        losses.append(loss)
        grads, _ = backward(net, cache, lg)
        adam_step(net, grads, state)
    for k in range(len(losses) - 50):
        assert losses[k + 50] < losses[k]


def test_adam_nonfinite_gradient_aborts(rng):
    net = linear_net(rng.standard_normal((2, 1)))
    bad = [(np.array([[np.nan], [0.0]]), np.zeros(1))]
    with pytest.raises(NumericalError, match="non-finite"):
        adam_step(net, bad, adam_init(net))


def test_adam_shape_mismatch_errors(rng):
    net = linear_net(rng.standard_normal((2, 1)))
    with pytest.raises(ValidationError):
        adam_step(net, [(np.zeros((3, 1)), np.zeros(1))], adam_init(net))


# ---------------------------------------------------------------------------
# grad_check
# ---------------------------------------------------------------------------

def test_grad_check_fresh_net(rng):
    net = DenseNet.build([8, 6, 4], ["relu", "identity"], [0.0, 0.0], rng)
    batch = rng.standard_normal((5, 8))
    target = rng.standard_normal((5, 4))
    assert grad_check(net, batch, lambda o: mse_loss(o, target)) < 1e-4


def test_grad_check_detects_sign_flip(rng):
    net = DenseNet.build([4, 3], ["identity"], [0.0], rng)
    batch = rng.standard_normal((6, 4))
    target = rng.standard_normal((6, 3))

    def flipped(out):
        value, grad = mse_loss(out, target)
        return value, -grad  # corrupted backward signal

    assert grad_check(net, batch, flipped) > 1e-1


def test_grad_check_linear_net_exact(rng):
    net = linear_net(rng.standard_normal((5, 2)))
    batch = rng.standard_normal((9, 5))
    target = rng.standard_normal((9, 2))
    assert grad_check(net, batch, lambda o: mse_loss(o, target)) < 1e-8


def test_grad_check_sampled_subset(rng):
    net = DenseNet.build([30, 30, 30], ["relu", "identity"], [0.0, 0.0], rng)
    batch = rng.standard_normal((4, 30))
    target = rng.standard_normal((4, 30))
    err = grad_check(net, batch, lambda o: mse_loss(o, target), max_params=500)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# determinism and dropout
# ---------------------------------------------------------------------------

def _train_k_steps(seed, k=25):
    rng = np.random.default_rng(seed)
    net = DenseNet.build([6, 8, 6], ["relu", "identity"], [0.3, 0.0], rng)
    x = np.random.default_rng(99).standard_normal((32, 6))
    state = adam_init(net)
    for _ in range(k):
        out, cache = forward(net, x, training=True)
        _, lg = mse_loss(out, x)
        grads, _ = backward(net, cache, lg)
        adam_step(net, grads, state)
    return net.snapshot()

def test_training_deterministic_per_seed():
    a = _train_k_steps(7)
    b = _train_k_steps(7)
    c = _train_k_steps(8)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert any(not np.array_equal(x, y) for x, y in zip(a, c))


def test_dropout_expectation_matches_eval_output(rng):
    net = DenseNet.build([5, 40, 3], ["relu", "identity"], [0.4, 0.0], rng)
    batch = rng.standard_normal((2, 5))
    eval_out, _ = forward(net, batch, training=False)
    total = np.zeros_like(eval_out)
    for _ in range(10_000):
        out, _ = forward(net, batch, training=True)
        total += out
    mean_out = total / 10_000
    scale = np.abs(eval_out).max()
    assert np.abs(mean_out - eval_out).max() / scale < 0.02


def test_dropout_masks_scale_preserved(rng):
    # inverted dropout: kept entries are scaled by 1/(1-p)
    net = DenseNet([Layer(np.eye(3), np.zeros(3), "identity", dropout=0.5)], rng)
    out, cache = forward(net, np.ones((4, 3)), training=True)
    kept = out[out != 0]
    assert np.all(kept == 2.0)
