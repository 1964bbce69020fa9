"""A small numpy MLP: ReLU hidden layers, 2-way softmax output, mean cross-entropy.

All parameters live in one flat float64 vector (the "weight vector" that
clients and server exchange). Per-layer matrices are views into it, laid out
as ``W_0, b_0, W_1, b_1, ...`` with ``W_l`` of shape ``(fan_in, fan_out)``
stored row-major.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dpxfin.metrics import ConfusionCounts


class DimensionError(ValueError):
    """Raised when an input or vector does not match the model's shape."""

    def __init__(self, what: str, expected, actual):
        super().__init__(f"{what}: expected {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


def param_count(layer_dims: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(layer_dims[:-1], layer_dims[1:]))


def _layer_views(layer_dims: Sequence[int], flat: np.ndarray):
    views = []
    offset = 0
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        w = flat[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = flat[offset:offset + fan_out]
        offset += fan_out
        views.append((w, b))
    return views


@dataclass(frozen=True, eq=False)
class MlpModel:
    layer_dims: tuple[int, ...]
    params: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError(f"layer_dims must hold >= 2 positive ints, got {dims}")
        params = np.array(self.params, dtype=np.float64).ravel()
        if params.size != param_count(dims):
            raise DimensionError("parameter vector length", param_count(dims), params.size)
        params.flags.writeable = False
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "params", params)

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return _layer_views(self.layer_dims, self.params)

    def with_params(self, params: np.ndarray) -> "MlpModel":
        return MlpModel(self.layer_dims, params)


def init_model(layer_dims: Sequence[int], seed) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    flat = np.zeros(param_count(layer_dims))
    for w, _ in _layer_views(layer_dims, flat):
        fan_in, fan_out = w.shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w[...] = rng.uniform(-limit, limit, size=w.shape)
    return MlpModel(tuple(layer_dims), flat)


def flatten(model: MlpModel) -> np.ndarray:
    return model.params.copy()


def unflatten(layer_dims: Sequence[int], vector: np.ndarray) -> MlpModel:
    return MlpModel(tuple(layer_dims), vector)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_batch(layer_dims, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer_dims[0]:
        raise DimensionError("batch feature columns", layer_dims[0], x.shape[-1] if x.ndim else x.shape)
    return x


def _forward_cached(layers, x):
    acts = [x]
    h = x
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        if i < len(layers) - 1:
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            h = z
    return acts, softmax(h)


def forward(model: MlpModel, batch) -> np.ndarray:
    x = _check_batch(model.layer_dims, batch)
    return _forward_cached(model.layers, x)[1]


def _backward_into(layer_dims, layers, x, y, out: np.ndarray) -> None:
    acts, probs = _forward_cached(layers, x)
    n = x.shape[0]
    delta = probs
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = _layer_views(layer_dims, out)
    for i in range(len(layers) - 1, -1, -1):
        gw, gb = grads[i]
        np.matmul(acts[i].T, delta, out=gw)
        delta.sum(axis=0, out=gb)
        if i:
            delta = delta @ layers[i][0].T
            delta *= acts[i] > 0


def _check_labels(y, n) -> np.ndarray:
    y = np.asarray(y).ravel()
    if y.size != n:
        raise DimensionError("label count", n, y.size)
    if y.size and not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return y.astype(np.intp)


def loss(model: MlpModel, batch, labels) -> float:
    """Mean cross-entropy."""
    x = _check_batch(model.layer_dims, batch)
    y = _check_labels(labels, x.shape[0])
    probs = forward(model, x)
    return float(-np.mean(np.log(np.maximum(probs[np.arange(len(y)), y], 1e-300))))


def backward(model: MlpModel, batch, labels) -> np.ndarray:
    """Gradient of the mean cross-entropy over ``batch``, flattened like ``model.params``."""
    x = _check_batch(model.layer_dims, batch)
    if x.shape[0] == 0:
        raise ValueError("cannot take a gradient over an empty batch")
    y = _check_labels(labels, x.shape[0])
    grad = np.empty(model.n_params)
    _backward_into(model.layer_dims, model.layers, x, y, grad)
    return grad


def sgd_step(model: MlpModel, gradient, lr: float) -> MlpModel:
    gradient = np.asarray(gradient, dtype=np.float64).ravel()
    if gradient.size != model.n_params:
        raise DimensionError("gradient length", model.n_params, gradient.size)
    return model.with_params(model.params - lr * gradient)


def train_local(model: MlpModel, shard, epochs: int, batch_size: int, lr: float,
                rng_seed) -> np.ndarray:
    """Plain mini-batch SGD from ``model``; returns ``w_final - w_initial``.

    ``shard`` is anything with ``features`` and ``labels`` arrays. The shuffle
    order for every epoch comes from ``rng_seed``.
    """
    x = _check_batch(model.layer_dims, shard.features)
    y = _check_labels(shard.labels, x.shape[0])
    if x.shape[0] == 0:
        raise ValueError("shard is empty")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(rng_seed)
    params = model.params.copy()
    layers = _layer_views(model.layer_dims, params)
    grad = np.empty_like(params)
    n = x.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _backward_into(model.layer_dims, layers, x[idx], y[idx], grad)
            params -= lr * grad
    return params - model.params


def predict(model: MlpModel, batch) -> np.ndarray:
    # argmax picks the first maximum, so ties go to class 0
    return np.argmax(forward(model, batch), axis=1)


def evaluate(model: MlpModel, dataset) -> ConfusionCounts:
    x = _check_batch(model.layer_dims, dataset.features)
    if x.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    y = _check_labels(dataset.labels, x.shape[0])
    pred = predict(model, x)
    return ConfusionCounts(
        tp=int(np.sum((pred == 1) & (y == 1))),
        fp=int(np.sum((pred == 1) & (y == 0))),
        tn=int(np.sum((pred == 0) & (y == 0))),
        fn=int(np.sum((pred == 0) & (y == 1))),
    )
