"""Dense feed-forward networks in plain numpy.

Just enough machinery to train the small classifiers that make up a pool:
layer specs, Glorot init, a softmax forward pass, three losses, manual
backprop and SGD/Adam updates. Weight matrices are stored ``(out_dim, in_dim)``
so a layer computes ``x @ W.T + b``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

ACTIVATIONS = ("relu", "softmax", "identity")
LOSSES = ("categorical_crossentropy", "mean_squared_error", "mean_absolute_error")
OPTIMIZERS = ("sgd", "adam")

CLIP_EPS = 1e-12
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigError(f"layer dims must be >= 1, got {self.in_dim}x{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


@dataclass
class Model:
    """A trained (or trainable) MLP.

    ``masks`` holds one 0/1 array per weight matrix once the model has been
    pruned.  ``qweights``/``act_params`` are filled in by
    :func:`prune2edge.quantizer.quantize_model`; when present, ``weights``
    holds the dequantized values so every inference path sees the same
    numbers.
    """

    layers: list[LayerSpec]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    masks: list[np.ndarray] | None = None
    metadata: dict = field(default_factory=dict)
    qweights: list | None = None
    act_params: list | None = None

    @property
    def n_features(self) -> int:
        return self.layers[0].in_dim

    @property
    def n_classes(self) -> int:
        return self.layers[-1].out_dim

    @property
    def is_quantized(self) -> bool:
        return self.qweights is not None

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def validate(self) -> None:
        if not self.layers:
            raise ConfigError("model has no layers")
        for k, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer {k} out_dim {a.out_dim} != layer {k + 1} in_dim {b.in_dim}")
        for k, spec in enumerate(self.layers[:-1]):
            if spec.activation == "softmax":
                raise ConfigError(f"softmax only allowed on the final layer (layer {k})")
        if len(self.weights) != len(self.layers) or len(self.biases) != len(self.layers):
            raise ShapeError("one weight and bias tensor per layer required")
        for k, (spec, w, b) in enumerate(zip(self.layers, self.weights, self.biases)):
            if w.shape != (spec.out_dim, spec.in_dim):
                raise ShapeError(f"weight {k} has shape {w.shape}, expected {(spec.out_dim, spec.in_dim)}")
            if b.shape != (spec.out_dim,):
                raise ShapeError(f"bias {k} has shape {b.shape}, expected {(spec.out_dim,)}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise NumericError(f"non-finite parameters in layer {k}")
        if self.masks is not None:
            if len(self.masks) != len(self.weights):
                raise ShapeError("one mask per weight tensor required")
            for k, (m, w) in enumerate(zip(self.masks, self.weights)):
                if m.shape != w.shape:
                    raise ShapeError(f"mask {k} shape {m.shape} != weight shape {w.shape}")
                if not np.isin(m, (0, 1)).all():
                    raise ConfigError(f"mask {k} is not binary")
                if np.any(w[m == 0] != 0):
                    raise ConfigError(f"weight {k} is nonzero at masked positions")


def mlp_layers(n_features: int, hidden: Sequence[int], n_classes: int) -> list[LayerSpec]:
    """Relu hidden layers followed by a softmax classifier head."""
    dims = [n_features, *hidden, n_classes]
    layers = [LayerSpec(a, b, "relu") for a, b in zip(dims[:-2], dims[1:-1])]
    layers.append(LayerSpec(dims[-2], dims[-1], "softmax"))
    return layers


def init_model(layers: Sequence[LayerSpec], seed: int, dtype=np.float32) -> Model:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for spec in layers:
        limit = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
        weights.append(rng.uniform(-limit, limit, size=(spec.out_dim, spec.in_dim)).astype(dtype))
        biases.append(np.zeros(spec.out_dim, dtype=dtype))
    model = Model(list(layers), weights, biases)
    model.validate()
    return model


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0)
    if activation == "softmax":
        return softmax(z)
    return z


def _check_inputs(model: Model, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=model.weights[0].dtype)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.n_features:
        raise ShapeError(f"expected inputs of width {model.n_features}, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise NumericError("non-finite values in inputs")
    return x


def _forward_cached(model: Model, x: np.ndarray):
    if model.act_params is not None:
        from .quantizer import fake_quantize
    acts, pre = [x], []
    a = x
    for k, (spec, w, b) in enumerate(zip(model.layers, model.weights, model.biases)):
        if model.act_params is not None:
            a = fake_quantize(a, model.act_params[k])
        z = a @ w.T + b
        a = _activate(z, spec.activation)
        pre.append(z)
        acts.append(a)
    return acts, pre


def forward(model: Model, inputs) -> np.ndarray:
    """Class scores for a ``(batch, n_features)`` input; probabilities when the head is softmax."""
    x = _check_inputs(model, inputs)
    acts, _ = _forward_cached(model, x)
    out = acts[-1]
    if not np.isfinite(out).all():
        raise NumericError("forward pass produced non-finite values")
    return out


def predict_classes(model: Model, inputs) -> np.ndarray:
    return np.argmax(forward(model, inputs), axis=1)


def one_hot(labels, n_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    return (labels[..., None] == np.arange(n_classes)).astype(dtype)


def loss(kind: str, predictions, one_hot_targets) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(one_hot_targets, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"predictions {p.shape} vs targets {y.shape}")
    if p.ndim == 1:
        p, y = p[None, :], y[None, :]
    if kind == "categorical_crossentropy":
        return float(-np.mean(np.sum(y * np.log(np.clip(p, CLIP_EPS, 1.0)), axis=1)))
    if kind == "mean_squared_error":
        return float(np.mean((p - y) ** 2))
    if kind == "mean_absolute_error":
        return float(np.mean(np.abs(p - y)))
    raise ConfigError(f"unknown loss {kind!r}")


def _loss_grad(kind: str, p: np.ndarray, y: np.ndarray) -> np.ndarray:
    batch = p.shape[0]
    if kind == "categorical_crossentropy":
        clipped = p < CLIP_EPS
        return np.where(clipped, 0, -y / np.maximum(p, CLIP_EPS)) / batch
    if kind == "mean_squared_error":
        return 2 * (p - y) / p.size
    if kind == "mean_absolute_error":
        return np.sign(p - y) / p.size
    raise ConfigError(f"unknown loss {kind!r}")


def backward(model: Model, inputs, one_hot_targets, kind: str):
    """Return ``(loss_value, weight_grads, bias_grads)`` for one batch.

    Gradients are taken through the full network, masked positions included;
    freezing pruned weights is the caller's job.
    """
    if kind == "categorical_crossentropy" and model.layers[-1].activation != "softmax":
        raise ConfigError("categorical_crossentropy needs a softmax output layer")
    x = _check_inputs(model, inputs)
    y = np.asarray(one_hot_targets, dtype=x.dtype)
    acts, pre = _forward_cached(model, x)
    p = acts[-1]
    if y.shape != p.shape:
        raise ShapeError(f"targets {y.shape} vs outputs {p.shape}")
    value = loss(kind, p, y)

    grad = _loss_grad(kind, p, y).astype(x.dtype)
    gw: list[np.ndarray] = [None] * len(model.layers)  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * len(model.layers)  # type: ignore[list-item]
    for k in range(len(model.layers) - 1, -1, -1):
        act = model.layers[k].activation
        if act == "softmax":
            out = acts[k + 1]
            dz = out * (grad - np.sum(grad * out, axis=1, keepdims=True))
        elif act == "relu":
            dz = grad * (pre[k] > 0)
        else:
            dz = grad
        gw[k] = dz.T @ acts[k]
        gb[k] = dz.sum(axis=0)
        if k:
            grad = dz @ model.weights[k]
    return value, gw, gb


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    step: int = 0
    first_moment: list[np.ndarray] | None = None
    second_moment: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")


DEFAULT_LR = {"sgd": 0.05, "adam": 0.001}


def make_optimizer(kind: str, learning_rate: float | None = None) -> OptimizerState:
    return OptimizerState(kind, DEFAULT_LR.get(kind, 0.01) if learning_rate is None else learning_rate)


def optimizer_step(state: OptimizerState, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
    """Update ``params`` in place and return them."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ShapeError("parameter/gradient shapes differ")
    lr = state.learning_rate
    if state.kind == "sgd":
        for p, g in zip(params, grads):
            p -= lr * g
        return params

    if state.first_moment is None:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    c1 = 1 - ADAM_BETA1**t
    c2 = 1 - ADAM_BETA2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return params


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def fit(model: Model, features, labels, *, loss_kind="categorical_crossentropy",
        optimizer: OptimizerState | None = None, epochs=10, batch_size=32, seed=0) -> Model:
    """Plain minibatch training, no pruning.  Mutates and returns ``model``."""
    optimizer = optimizer or make_optimizer("sgd")
    x = _check_inputs(model, features)
    y = one_hot(labels, model.n_classes, dtype=x.dtype)
    rng = np.random.default_rng(seed)
    params = [*model.weights, *model.biases]
    for _ in range(epochs):
        for idx in iterate_batches(len(x), batch_size, rng):
            _, gw, gb = backward(model, x[idx], y[idx], loss_kind)
            optimizer_step(optimizer, params, [*gw, *gb])
    return model


def accuracy(model: Model, features, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return float(np.mean(predict_classes(model, features) == labels))
