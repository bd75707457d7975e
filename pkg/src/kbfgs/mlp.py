"""Fully-connected feed-forward networks with manual backpropagation.

Each weight matrix ``W_l`` has shape ``(out_dim, in_dim + 1)``; the last
column is the bias, which multiplies the constant 1 appended to the layer
input (the "homogeneous" input ``a_bar``).  Batches are stored row-wise:
``inputs[i]`` is sample ``i``.
"""

from dataclasses import dataclass, field
from functools import cached_property
from typing import List, Sequence

import numpy as np

from .errors import DimensionError, NumericalDivergenceError
from .linalg import batch_outer_mean

ACTIVATIONS = ("relu", "sigmoid", "tanh", "linear")
LOSSES = ("binary_entropy", "mse")
CLAMP = 1e-12


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "linear"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise DimensionError(f"layer dims must be >= 1, got {self.in_dim}->{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def layer_specs(widths, activations):
    """Build chained specs from a width list and one activation per layer."""
    widths = list(widths)
    activations = list(activations)
    if len(widths) != len(activations) + 1:
        raise DimensionError("need exactly one activation per layer")
    return [LayerSpec(i, o, act) for i, o, act in zip(widths[:-1], widths[1:], activations)]


@dataclass
class NetworkModel:
    layers: List[LayerSpec]
    weights: List[np.ndarray]
    loss_kind: str = "mse"
    l2_coeff: float = 0.0

    def __post_init__(self):
        if self.loss_kind not in LOSSES:
            raise ValueError(f"unknown loss {self.loss_kind!r}")
        if self.l2_coeff < 0:
            raise ValueError("l2_coeff must be non-negative")
        if len(self.layers) != len(self.weights):
            raise DimensionError("one weight matrix per layer is required")
        for l, (spec, w) in enumerate(zip(self.layers, self.weights), start=1):
            if w.shape != (spec.out_dim, spec.in_dim + 1):
                raise DimensionError(
                    f"layer {l}: weight shape {w.shape} != {(spec.out_dim, spec.in_dim + 1)}"
                )
        for prev, nxt in zip(self.layers[:-1], self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise DimensionError("adjacent layer dimensions do not chain")

    @property
    def input_dim(self):
        return self.layers[0].in_dim

    @property
    def output_dim(self):
        return self.layers[-1].out_dim

    @property
    def num_params(self):
        return sum(w.size for w in self.weights)

    def copy(self):
        return NetworkModel(list(self.layers), [w.copy() for w in self.weights],
                            self.loss_kind, self.l2_coeff)


@dataclass
class DataBatch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=np.float64))
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise DimensionError("inputs and targets have different sample counts")

    def __len__(self):
        return self.inputs.shape[0]


@dataclass
class LayerTrace:
    """Per-layer minibatch quantities from one forward/backward pass.

    ``a_prev`` holds the homogeneous inputs (one row per sample) and ``g``
    the per-sample loss gradients with respect to the pre-activations.
    The second-moment matrices are computed on first access.
    """

    a_prev: np.ndarray
    h: np.ndarray
    g: np.ndarray
    grad_mean: np.ndarray

    @property
    def a_bar_prev(self):
        return self.a_prev.mean(axis=0)

    @property
    def h_bar(self):
        return self.h.mean(axis=0)

    @property
    def g_bar(self):
        return self.g.mean(axis=0)

    @cached_property
    def a_outer_mean(self):
        return batch_outer_mean(self.a_prev)

    @cached_property
    def g_outer_mean(self):
        return batch_outer_mean(self.g)


@dataclass
class BatchTrace:
    layers: List[LayerTrace] = field(default_factory=list)
    loss: float = 0.0

    @property
    def grads(self):
        return [lt.grad_mean for lt in self.layers]


def glorot_bound(fan_in, fan_out):
    return np.sqrt(6.0 / (fan_in + fan_out))


def init_weights(specs: Sequence[LayerSpec], rng_seed, loss_kind="mse", l2_coeff=0.0):
    """Uniform Glorot weights with a zero bias column."""
    rng = np.random.default_rng(rng_seed)
    weights = []
    for spec in specs:
        r = glorot_bound(spec.in_dim, spec.out_dim)
        w = np.zeros((spec.out_dim, spec.in_dim + 1))
        w[:, :-1] = rng.uniform(-r, r, size=(spec.out_dim, spec.in_dim))
        weights.append(w)
    return NetworkModel(list(specs), weights, loss_kind, l2_coeff)


def activate(kind, h):
    if kind == "relu":
        return np.maximum(h, 0.0)
    if kind == "sigmoid":
        # split on sign to avoid overflow in exp
        out = np.empty_like(h)
        pos = h >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-h[pos]))
        e = np.exp(h[~pos])
        out[~pos] = e / (1.0 + e)
        return out
    if kind == "tanh":
        return np.tanh(h)
    return h


def activation_derivative(kind, h, a):
    """Derivative of the activation given pre-activation ``h`` and output ``a``."""
    if kind == "relu":
        return (h > 0).astype(np.float64)
    if kind == "sigmoid":
        return a * (1.0 - a)
    if kind == "tanh":
        return 1.0 - a * a
    return np.ones_like(h)


def sample_losses(loss_kind, a, y):
    """Per-sample loss summed over output units."""
    if loss_kind == "mse":
        return 0.5 * np.sum((a - y) ** 2, axis=1)
    ac = np.clip(a, CLAMP, 1.0 - CLAMP)
    return -np.sum(y * np.log(ac) + (1.0 - y) * np.log(1.0 - ac), axis=1)


def loss_output_gradient(loss_kind, a, y):
    if loss_kind == "mse":
        return a - y
    inside = (a > CLAMP) & (a < 1.0 - CLAMP)
    ac = np.clip(a, CLAMP, 1.0 - CLAMP)
    return np.where(inside, (ac - y) / (ac * (1.0 - ac)), 0.0)


def l2_penalty(model):
    if model.l2_coeff == 0.0:
        return 0.0
    return 0.5 * model.l2_coeff * sum(float(np.sum(w * w)) for w in model.weights)


def _homogeneous(a):
    return np.hstack([a, np.ones((a.shape[0], 1))])


def forward(model, x):
    """Return homogeneous inputs, pre-activations and outputs for every layer."""
    a = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if a.shape[1] != model.input_dim:
        raise DimensionError(f"input dim {a.shape[1]} != network input {model.input_dim}")
    a_prevs, hs, acts = [], [], []
    for l, (spec, w) in enumerate(zip(model.layers, model.weights), start=1):
        a_bar = _homogeneous(a)
        # overflow is reported below as a divergence
        with np.errstate(over="ignore", invalid="ignore"):
            h = a_bar @ w.T
            a = activate(spec.activation, h)
        if not np.all(np.isfinite(a)):
            raise NumericalDivergenceError(f"non-finite activation in layer {l}", layer=l)
        a_prevs.append(a_bar)
        hs.append(h)
        acts.append(a)
    return a_prevs, hs, acts


def _check_batch(model, batch):
    if len(batch) == 0:
        raise DimensionError("batch is empty")
    if batch.targets.shape[1] != model.output_dim:
        raise DimensionError(
            f"target dim {batch.targets.shape[1]} != network output {model.output_dim}"
        )


def predict(model, inputs):
    return forward(model, inputs)[2][-1]


def loss_only(model, batch):
    """Mean per-sample loss plus the L2 term; forward pass only."""
    _check_batch(model, batch)
    out = predict(model, batch.inputs)
    loss = float(np.mean(sample_losses(model.loss_kind, out, batch.targets))) + l2_penalty(model)
    if not np.isfinite(loss):
        raise NumericalDivergenceError("non-finite loss", layer=0)
    return loss


def forward_backward(model, batch):
    """One forward/backward pass over ``batch`` returning a :class:`BatchTrace`."""
    _check_batch(model, batch)
    a_prevs, hs, acts = forward(model, batch.inputs)
    m = len(batch)
    y = batch.targets
    loss = float(np.mean(sample_losses(model.loss_kind, acts[-1], y))) + l2_penalty(model)
    if not np.isfinite(loss):
        raise NumericalDivergenceError("non-finite loss", layer=0)

    traces = [None] * len(model.layers)
    last = len(model.layers) - 1
    if model.loss_kind == "binary_entropy" and model.layers[-1].activation == "sigmoid":
        # exact derivative w.r.t. the logits; does not vanish on saturated units
        fused = acts[-1] - y
    else:
        fused = None
        da = loss_output_gradient(model.loss_kind, acts[-1], y)
    for l in range(last, -1, -1):
        spec, w = model.layers[l], model.weights[l]
        with np.errstate(over="ignore", invalid="ignore"):
            if l == last and fused is not None:
                g = fused
            else:
                g = da * activation_derivative(spec.activation, hs[l], acts[l])
            grad = (g.T @ a_prevs[l]) / m
            if model.l2_coeff:
                grad = grad + model.l2_coeff * w
        if not np.all(np.isfinite(grad)):
            raise NumericalDivergenceError(f"non-finite gradient in layer {l + 1}", layer=l + 1)
        traces[l] = LayerTrace(a_prev=a_prevs[l], h=hs[l], g=g, grad_mean=grad)
        if l > 0:
            with np.errstate(over="ignore", invalid="ignore"):
                da = g @ w[:, :-1]
    return BatchTrace(layers=traces, loss=loss)


def apply_step(model, directions, alpha):
    """In-place update ``W_l -= alpha * p_l`` for every layer."""
    if len(directions) != len(model.weights):
        raise DimensionError("one direction per layer is required")
    for w, p in zip(model.weights, directions):
        if p.shape != w.shape:
            raise DimensionError(f"direction shape {p.shape} != weight shape {w.shape}")
    for w, p in zip(model.weights, directions):
        w -= alpha * p


def sample_predictive_targets(model, inputs, rng):
    """Draw targets from the model's predictive distribution at ``inputs``."""
    out = predict(model, inputs)
    if model.loss_kind == "binary_entropy":
        return (rng.random(out.shape) < out).astype(np.float64)
    return out + rng.standard_normal(out.shape)
