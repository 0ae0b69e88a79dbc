"""Multilayer perceptron with softmax output and hand-written backpropagation.

Parameters are packed layer-major: for each layer the weight matrix
``(fan_in, fan_out)`` in row-major order, then its bias vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import DimensionError

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output layer")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if sizes[-1] < 2:
            raise ValueError("output layer must have at least 2 classes")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def dim(self) -> int:
        return sum(a * b + b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def slices(self) -> list[tuple[slice, slice, tuple[int, int]]]:
        """(weight slice, bias slice, weight shape) for each layer."""
        out = []
        offset = 0
        for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = slice(offset, offset + a * b)
            offset += a * b
            bias = slice(offset, offset + b)
            offset += b
            out.append((w, bias, (a, b)))
        return out


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    domain_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise ValueError("batch inputs must be a 2-D matrix")
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        n = self.inputs.shape[0]
        if self.domain_ids is None:
            self.domain_ids = np.zeros(n, dtype=np.int64)
        else:
            self.domain_ids = np.asarray(self.domain_ids, dtype=np.int64).reshape(-1)
        if self.labels.size != n or self.domain_ids.size != n:
            raise ValueError("inputs, labels and domain_ids must have the same row count")
        if n and self.labels.min() < 0:
            raise ValueError("labels must be non-negative class indices")

    def __len__(self) -> int:
        return self.inputs.shape[0]


def init_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """He-normal weights for relu, LeCun-normal for tanh; zero biases."""
    theta = np.zeros(spec.dim)
    gain = 2.0 if spec.activation == "relu" else 1.0
    for w, _, (fan_in, fan_out) in spec.slices():
        theta[w] = rng.standard_normal(fan_in * fan_out) * np.sqrt(gain / fan_in)
    return theta


def _check(spec: MlpSpec, theta: np.ndarray, batch: Batch) -> None:
    if theta.shape != (spec.dim,):
        raise DimensionError(spec.dim, theta.size, "parameter")
    if batch.inputs.shape[1] != spec.input_dim:
        raise DimensionError(spec.input_dim, batch.inputs.shape[1], "input")
    if len(batch) and batch.labels.max() >= spec.num_classes:
        raise ValueError(f"label {batch.labels.max()} out of range for {spec.num_classes} classes")


def _act(spec: MlpSpec, z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) if spec.activation == "relu" else np.tanh(z)


def _unpack(spec: MlpSpec, theta: np.ndarray):
    return [(theta[w].reshape(shape), theta[b]) for w, b, shape in spec.slices()]


def logits(spec: MlpSpec, theta: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    h = np.asarray(inputs, dtype=np.float64)
    layers = _unpack(spec, theta)
    for k, (W, b) in enumerate(layers):
        h = h @ W + b
        if k < len(layers) - 1:
            h = _act(spec, h)
    return h


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def predict(spec: MlpSpec, theta: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Predicted classes; ties go to the lowest class index."""
    return np.argmax(logits(spec, theta, inputs), axis=1)


def forward_loss(spec: MlpSpec, theta: np.ndarray, batch: Batch) -> tuple[float, float]:
    """Mean cross-entropy and accuracy over the batch."""
    _check(spec, theta, batch)
    z = logits(spec, theta, batch.inputs)
    logp = _log_softmax(z)
    n = len(batch)
    loss = -float(logp[np.arange(n), batch.labels].mean())
    acc = float((np.argmax(z, axis=1) == batch.labels).mean())
    return max(loss, 0.0), acc


def zero_one_loss(spec: MlpSpec, theta: np.ndarray, batch: Batch) -> float:
    """Mean 0-1 error, the bounded loss (values in [0, 1]) used by the theory diagnostics."""
    _check(spec, theta, batch)
    return 1.0 - forward_loss(spec, theta, batch)[1]


def backward(spec: MlpSpec, theta: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its exact gradient with respect to ``theta``."""
    _check(spec, theta, batch)
    layers = _unpack(spec, theta)
    n = len(batch)
    hs = [batch.inputs]
    zs = []
    h = batch.inputs
    for k, (W, b) in enumerate(layers):
        z = h @ W + b
        zs.append(z)
        h = _act(spec, z) if k < len(layers) - 1 else z
        hs.append(h)

    logp = _log_softmax(zs[-1])
    loss = -float(logp[np.arange(n), batch.labels].mean())
    delta = np.exp(logp)
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n

    grad = np.empty_like(theta)
    slices = spec.slices()
    for k in range(len(layers) - 1, -1, -1):
        w_sl, b_sl, _ = slices[k]
        grad[w_sl] = (hs[k].T @ delta).reshape(-1)
        grad[b_sl] = delta.sum(axis=0)
        if k == 0:
            break
        delta = delta @ layers[k][0].T
        if spec.activation == "relu":
            delta = delta * (zs[k - 1] > 0.0)
        else:
            delta = delta * (1.0 - hs[k] ** 2)
    return max(loss, 0.0), grad
