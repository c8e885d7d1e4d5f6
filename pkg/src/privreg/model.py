"""Small dense feed-forward models with explicit forward/backward passes.

A model is a chain of affine layers; hidden layers share one activation,
the output layer is always linear.  Parameters live in a single flat
float64 vector with per-layer weight and bias slices, which keeps the
noise mechanisms and regularizers coordinate-aligned.  The loss is the
plain squared error sum((y - t)^2), so a one-layer linear model with
scalar output has per-weight gradient 2*(y - t)*x_i and bias gradient
2*(y - t).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .numerics import RngStream

ACTIVATIONS = ("identity", "tanh", "relu")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture: layer sizes (input first), hidden activation, bias flag."""

    layer_sizes: tuple[int, ...]
    activation: str = "identity"
    include_bias: bool = True

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("need at least one layer transition")
        if any(s < 1 for s in sizes):
            raise ValueError(f"all layer sizes must be >= 1, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]


@dataclass(frozen=True)
class LayerSlices:
    weights: slice
    bias: slice | None
    fan_in: int
    fan_out: int


@lru_cache(maxsize=None)
def layout(spec: ModelSpec) -> tuple[LayerSlices, ...]:
    """Flat-vector slices for each layer's weight block and bias block."""
    slices = []
    offset = 0
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        w = slice(offset, offset + fan_in * fan_out)
        offset = w.stop
        b = None
        if spec.include_bias:
            b = slice(offset, offset + fan_out)
            offset = b.stop
        slices.append(LayerSlices(weights=w, bias=b, fan_in=fan_in, fan_out=fan_out))
    return tuple(slices)


def n_params(spec: ModelSpec) -> int:
    last = layout(spec)[-1]
    return (last.bias or last.weights).stop


@dataclass
class ParameterSet:
    """Flat parameter vector tied to the architecture that shapes it."""

    spec: ModelSpec
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64).ravel()
        expected = n_params(self.spec)
        if self.flat.size != expected:
            raise ValueError(f"expected {expected} parameters, got {self.flat.size}")
        if not np.isfinite(self.flat).all():
            raise ValueError("parameters must be finite")

    def weights(self, layer: int) -> np.ndarray:
        ls = layout(self.spec)[layer]
        return self.flat[ls.weights].reshape(ls.fan_out, ls.fan_in)

    def bias(self, layer: int) -> np.ndarray | None:
        ls = layout(self.spec)[layer]
        return None if ls.bias is None else self.flat[ls.bias]

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.spec, self.flat.copy())


@dataclass(frozen=True)
class Example:
    x: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=np.float64)))
        object.__setattr__(self, "t", np.atleast_1d(np.asarray(self.t, dtype=np.float64)))


@dataclass
class Dataset:
    """Ordered examples sharing one feature dimension."""

    examples: list[Example]
    dim: int

    def __post_init__(self):
        for i, ex in enumerate(self.examples):
            if ex.x.shape != (self.dim,):
                raise ValueError(f"example {i} has dimension {ex.x.shape[0]}, expected {self.dim}")

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def matrices(self) -> tuple[np.ndarray, np.ndarray]:
        """(X, T) with one example per row."""
        x = np.stack([ex.x for ex in self.examples])
        t = np.stack([ex.t for ex in self.examples])
        return x, t


@dataclass
class ForwardTrace:
    """Per-layer incoming activations, pre-activations, and outputs."""

    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        return self.post[-1]


def init_params(spec: ModelSpec, rng: RngStream) -> ParameterSet:
    """Seeded uniform init in [-r, r] with r = 1/sqrt(fan_in), per layer.

    Keeps early training near the linear regime and avoids an all-zero
    vector, which would silence parameter-proportional noise entirely.
    """
    flat = np.empty(n_params(spec))
    for ls in layout(spec):
        r = 1.0 / np.sqrt(ls.fan_in)
        width = ls.weights.stop - ls.weights.start
        flat[ls.weights] = rng.uniform(width) * (2.0 * r) - r
        if ls.bias is not None:
            flat[ls.bias] = rng.uniform(ls.fan_out) * (2.0 * r) - r
    return ParameterSet(spec, flat)


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _activate_prime(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "identity":
        return np.ones_like(z)
    if name == "tanh":
        return 1.0 - a * a
    return (z > 0.0).astype(np.float64)


def forward(spec: ModelSpec, params: ParameterSet, x: np.ndarray) -> ForwardTrace:
    """Run the network on one input, keeping every intermediate value."""
    if params.spec != spec:
        raise ValueError("parameters were built for a different architecture")
    a = np.asarray(x, dtype=np.float64).ravel()
    if a.shape != (spec.input_dim,):
        raise ValueError(f"input has dimension {a.shape[0]}, expected {spec.input_dim}")
    trace = ForwardTrace()
    for layer in range(spec.n_layers):
        z = params.weights(layer) @ a
        b = params.bias(layer)
        if b is not None:
            z = z + b
        act = spec.activation if layer < spec.n_layers - 1 else "identity"
        trace.inputs.append(a)
        trace.pre.append(z)
        a = _activate(act, z)
        trace.post.append(a)
    return trace


def quadratic_loss(y: np.ndarray, t: np.ndarray) -> float:
    """Squared Euclidean distance; (y - t)^2 in the scalar case."""
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if y.shape != t.shape:
        raise ValueError(f"output shape {y.shape} does not match target shape {t.shape}")
    diff = y - t
    return float(np.dot(diff, diff))


def backward(spec: ModelSpec, params: ParameterSet, trace: ForwardTrace,
             t: np.ndarray) -> np.ndarray:
    """Exact gradient of quadratic_loss(output, t) w.r.t. the flat parameters."""
    if len(trace.pre) != spec.n_layers or len(trace.inputs) != spec.n_layers:
        raise ValueError("trace depth does not match the architecture")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    y = trace.output
    if y.shape != t.shape:
        raise ValueError(f"target shape {t.shape} does not match output shape {y.shape}")
    if trace.inputs[0].shape != (spec.input_dim,):
        raise ValueError("trace input dimension does not match the architecture")

    grad = np.zeros(n_params(spec))
    delta = 2.0 * (y - t)  # output layer is linear
    for layer in range(spec.n_layers - 1, -1, -1):
        ls = layout(spec)[layer]
        a_in = trace.inputs[layer]
        grad[ls.weights] = np.outer(delta, a_in).ravel()
        if ls.bias is not None:
            grad[ls.bias] = delta
        if layer > 0:
            act = spec.activation
            back = params.weights(layer).T @ delta
            delta = back * _activate_prime(act, trace.pre[layer - 1], trace.post[layer - 1])
    return grad


def per_example_gradients(spec: ModelSpec, params: ParameterSet,
                          batch: list[Example]) -> list[np.ndarray]:
    """One quadratic-loss gradient per example; their mean is the gradient
    of the mean batch loss."""
    if len(batch) == 0:
        raise ValueError("batch must be nonempty")
    grads = []
    for ex in batch:
        trace = forward(spec, params, ex.x)
        grads.append(backward(spec, params, trace, ex.t))
    return grads
