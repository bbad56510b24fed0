"""Minimal dense feed-forward network with exact analytic gradients, Adam,
and a finite-difference gradient checker. All math is float64 and pure numpy,
which keeps determinism and gradient checks tight.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError, ValidationError

ACTIVATIONS = ("relu", "identity")


@dataclass
class Layer:
    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "relu"
    dropout: float = 0.0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must lie in [0, 1)")


class DenseNet:
    """Stack of affine layers with relu/identity activations and per-layer
    inverted dropout. Parameters are updated in place by the optimizer; a
    version counter invalidates stale forward caches."""

    def __init__(self, layers: list[Layer], rng: np.random.Generator):
        dims_ok = all(
            a.weight.shape[1] == b.weight.shape[0] for a, b in zip(layers, layers[1:])
        )
        if not dims_ok:
            raise ValidationError("consecutive layer dimensions do not chain")
        self.layers = layers
        self.rng = rng
        self.version = 0

    @classmethod
    def build(
        cls,
        dims: Sequence[int],
        activations: Sequence[str],
        dropouts: Sequence[float],
        rng: np.random.Generator,
    ) -> "DenseNet":
        """Kaiming-uniform fan-in initialization; biases start at zero."""
        if len(activations) != len(dims) - 1 or len(dropouts) != len(dims) - 1:
            raise ValidationError("need one activation and dropout per layer")
        layers = []
        for fan_in, fan_out, act, p in zip(dims, dims[1:], activations, dropouts):
            bound = np.sqrt(6.0 / fan_in)
            weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            layers.append(Layer(weight, np.zeros(fan_out), act, p))
        return cls(layers, rng)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def snapshot(self) -> list[np.ndarray]:
        return [p.copy() for p in self.parameters()]

    def restore(self, snapshot: list[np.ndarray]) -> None:
        for p, s in zip(self.parameters(), snapshot):
            p[...] = s
        self.version += 1

    def check_finite(self) -> None:
        for i, p in enumerate(self.parameters()):
            if not np.all(np.isfinite(p)):
                raise NumericalError(f"non-finite parameter tensor #{i}")


@dataclass
class ForwardCache:
    net: DenseNet
    version: int
    training: bool
    inputs: list[np.ndarray]  # input to each layer
    pre_acts: list[np.ndarray]
    masks: list[np.ndarray | None]  # inverted-dropout keep masks, already scaled


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    return z


def forward(
    net: DenseNet, batch: np.ndarray, training: bool = False
) -> tuple[np.ndarray, ForwardCache]:
    """Affine + activation per layer; inverted dropout (scale 1/(1-p))
    when training. The input batch is never modified."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != net.input_dim:
        raise ValidationError(
            f"batch has {batch.shape[-1] if batch.ndim == 2 else '?'} columns, "
            f"net expects {net.input_dim}"
        )
    x = batch
    inputs, pre_acts, masks = [], [], []
    for layer in net.layers:
        inputs.append(x)
        z = x @ layer.weight + layer.bias
        pre_acts.append(z)
        x = _activate(z, layer.activation)
        if training and layer.dropout > 0.0:
            keep = net.rng.random(x.shape) >= layer.dropout
            mask = keep / (1.0 - layer.dropout)
            x = x * mask
            masks.append(mask)
        else:
            masks.append(None)
    cache = ForwardCache(net, net.version, training, inputs, pre_acts, masks)
    return x, cache


def backward(
    net: DenseNet, cache: ForwardCache, loss_grad: np.ndarray
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Exact gradients of the cached forward pass composed with ``loss_grad``.

    Returns per-layer (dW, db) plus the gradient with respect to the network
    input (used to chain encoder and decoder).
    """
    if cache.net is not net or cache.version != net.version:
        raise ValidationError("stale forward cache: parameters changed since forward")
    grad = np.asarray(loss_grad, dtype=np.float64)
    param_grads: list[tuple[np.ndarray, np.ndarray]] = []
    for layer, x_in, z, mask in zip(
        reversed(net.layers),
        reversed(cache.inputs),
        reversed(cache.pre_acts),
        reversed(cache.masks),
    ):
        if mask is not None:
            grad = grad * mask
        if layer.activation == "relu":
            grad = grad * (z > 0.0)
        dw = x_in.T @ grad
        db = grad.sum(axis=0)
        grad = grad @ layer.weight.T
        param_grads.append((dw, db))
    param_grads.reverse()
    return param_grads, grad


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all entries, with its gradient in ``pred``."""
    if pred.shape != target.shape:
        raise ValidationError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff**2)), (2.0 / diff.size) * diff


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moments: list[np.ndarray] = field(default_factory=list)
    second_moments: list[np.ndarray] = field(default_factory=list)


def adam_init(
    net: DenseNet,
    learning_rate: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> AdamState:
    params = net.parameters()
    return AdamState(
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
        first_moments=[np.zeros_like(p) for p in params],
        second_moments=[np.zeros_like(p) for p in params],
    )


def adam_step(
    net: DenseNet, grads: list[tuple[np.ndarray, np.ndarray]], state: AdamState
) -> tuple[DenseNet, AdamState]:
    """Standard Adam update with bias correction, applied in place."""
    flat: list[np.ndarray] = []
    for dw, db in grads:
        flat.extend((dw, db))
    params = net.parameters()
    if len(flat) != len(params) or any(g.shape != p.shape for g, p in zip(flat, params)):
        raise ValidationError("gradient shapes do not align with parameters")
    for i, g in enumerate(flat):
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in tensor #{i} at step {state.step_count + 1}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, flat, state.first_moments, state.second_moments):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g**2
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    net.version += 1
    return net, state


def grad_check(
    net: DenseNet,
    batch: np.ndarray,
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    step: float = 1e-4,
    max_params: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic gradients and central finite
    differences. Runs with dropout disabled (training=False on both paths).

    ``max_params`` caps the number of coordinates probed (sampled, at least
    500 when capped); None sweeps every parameter.
    """
    out, cache = forward(net, batch, training=False)
    _, loss_grad = loss_fn(out)
    grads, _ = backward(net, cache, loss_grad)
    flat_analytic = []
    for dw, db in grads:
        flat_analytic.extend((dw.ravel(), db.ravel()))
    analytic = np.concatenate(flat_analytic)

    params = net.parameters()
    sizes = [p.size for p in params]
    offsets = np.cumsum([0] + sizes)
    total = offsets[-1]

    if max_params is not None and max_params < total:
        n_probe = max(500, max_params)
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(total, size=min(n_probe, total), replace=False)
    else:
        coords = np.arange(total)

    max_rel = 0.0
    for c in coords:
        tensor_i = int(np.searchsorted(offsets, c, side="right") - 1)
        inner = int(c - offsets[tensor_i])
        p = params[tensor_i]
        flat_view = p.ravel()
        orig = flat_view[inner]

        flat_view[inner] = orig + step
        lo_plus, _ = loss_fn(forward(net, batch, training=False)[0])
        flat_view[inner] = orig - step
        lo_minus, _ = loss_fn(forward(net, batch, training=False)[0])
        flat_view[inner] = orig

        numeric = (lo_plus - lo_minus) / (2.0 * step)
        a = analytic[c]
        rel = abs(a - numeric) / max(abs(a) + abs(numeric), 1e-8)
        max_rel = max(max_rel, rel)
    return max_rel
