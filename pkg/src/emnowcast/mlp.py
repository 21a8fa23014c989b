"""Two-hidden-layer feed-forward networks trained with Adam on Poisson/softmax losses.

Everything is plain numpy with hand-written backpropagation. The loss is the
negative expected complete log-likelihood summed (not averaged) over rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .exceptions import ContractError, DivergenceError
from .validation import SCORE_CLAMP, check_counts, check_features, log_softmax, softmax

WEIGHTS_FORMAT = "emnowcast.network-weights"
WEIGHTS_VERSION = 1
HEADS = ("occurrence", "reporting")
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0).astype(np.float64)),
    "sigmoid": (lambda z: 0.5 * (1.0 + np.tanh(0.5 * z)), lambda z, a: a * (1.0 - a)),
}


# --------------------------------------------------------------------------
# standardization
# --------------------------------------------------------------------------


class StandardizedArray(np.ndarray):
    """Marker subclass for feature matrices that already went through a Standardizer."""


def _is_indicator(col: np.ndarray) -> bool:
    return bool(np.all((col == 0.0) | (col == 1.0)))


@dataclass(frozen=True)
class Standardizer:
    """Per-column affine map fitted on training rows; 0/1 columns pass through."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X) -> Standardizer:
        if isinstance(X, StandardizedArray):
            raise ContractError("features are already standardized")
        X = check_features(X)
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        for k in range(X.shape[1]):
            if _is_indicator(X[:, k]):
                mean[k], scale[k] = 0.0, 1.0
        scale[scale == 0] = 1.0
        return cls(mean, scale)

    def transform(self, X) -> StandardizedArray:
        if isinstance(X, StandardizedArray):
            raise ContractError("features are already standardized")
        X = check_features(X, self.mean.shape[0])
        return ((X - self.mean) / self.scale).view(StandardizedArray)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> Standardizer:
        return cls(np.array(doc["mean"], dtype=np.float64), np.array(doc["scale"], dtype=np.float64))


# --------------------------------------------------------------------------
# weights and forward/backward passes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NetworkWeights:
    """Biases and weight matrices per layer; ``weights[m]`` has shape ``(out, in)``."""

    biases: tuple
    weights: tuple
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if len(self.biases) != len(self.weights) or not self.weights:
            raise ContractError("need one bias vector per weight matrix")
        biases = tuple(np.array(b, dtype=np.float64) for b in self.biases)
        weights = tuple(np.array(w, dtype=np.float64) for w in self.weights)
        for m, (b, w) in enumerate(zip(biases, weights)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ContractError(f"layer {m + 1} bias/weight shapes disagree")
            if m and w.shape[1] != weights[m - 1].shape[0]:
                raise ContractError(f"layer {m + 1} input width does not match layer {m} output")
            if not (np.all(np.isfinite(b)) and np.all(np.isfinite(w))):
                raise ContractError("network parameters must be finite")
            b.setflags(write=False)
            w.setflags(write=False)
        object.__setattr__(self, "biases", biases)
        object.__setattr__(self, "weights", weights)

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_outputs(self) -> int:
        return self.weights[-1].shape[0]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for b, w in zip(self.biases, self.weights):
            out += [b, w]
        return out

    @classmethod
    def from_parameters(cls, params: Sequence[np.ndarray], activation: str) -> NetworkWeights:
        return cls(tuple(params[0::2]), tuple(params[1::2]), activation)

    def to_dict(self) -> dict:
        return {
            "format": WEIGHTS_FORMAT,
            "version": WEIGHTS_VERSION,
            "activation": self.activation,
            "layers": [
                {"shape": list(w.shape), "bias": b.tolist(), "weight": w.reshape(-1).tolist()}
                for b, w in zip(self.biases, self.weights)
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> NetworkWeights:
        if doc.get("format") != WEIGHTS_FORMAT or doc.get("version") != WEIGHTS_VERSION:
            raise ContractError("not a supported network-weights document")
        layers = doc["layers"]
        biases = [np.array(layer["bias"], dtype=np.float64) for layer in layers]
        weights = [np.array(layer["weight"], dtype=np.float64).reshape(layer["shape"]) for layer in layers]
        return cls(tuple(biases), tuple(weights), doc["activation"])

    def equals(self, other: NetworkWeights) -> bool:
        return self.activation == other.activation and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.parameters(), other.parameters())
        )


def _forward(params: Sequence[np.ndarray], activation: str, X: np.ndarray):
    act, _ = _ACTIVATIONS[activation]
    biases, weights = params[0::2], params[1::2]
    pre, post = [], [X]
    a = X
    last = len(weights) - 1
    for m, (b, w) in enumerate(zip(biases, weights)):
        z = a @ w.T + b
        pre.append(z)
        a = z if m == last else act(z)
        post.append(a)
    return pre, post


def forward(net: NetworkWeights, X, head: str | None = None) -> np.ndarray:
    """Network scores; with ``head`` the matching link is applied (exp or softmax)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != net.n_inputs:
        raise ContractError(f"network expects {net.n_inputs} inputs, got {X.shape[1]}")
    scores = _forward(net.parameters(), net.activation, X)[1][-1]
    if head is None:
        return scores
    if head == "occurrence":
        return np.exp(np.clip(scores[:, 0], -SCORE_CLAMP, SCORE_CLAMP))
    if head == "reporting":
        return softmax(scores)
    raise ContractError(f"unknown head {head!r}")


def head_loss(scores: np.ndarray, target: np.ndarray, head: str) -> float:
    """Negative q-criterion: ``sum(exp(f) - N f)`` or ``-sum(N log softmax(f))``."""
    if head == "occurrence":
        f = np.minimum(scores[:, 0], SCORE_CLAMP)
        return float(np.sum(np.exp(f) - target * f))
    return float(-np.sum(target * log_softmax(scores)))


def _output_gradient(scores: np.ndarray, target: np.ndarray, head: str) -> np.ndarray:
    if head == "occurrence":
        return (np.exp(np.minimum(scores[:, 0], SCORE_CLAMP)) - target)[:, None]
    return target.sum(axis=1, keepdims=True) * softmax(scores) - target


def loss_and_gradients(net: NetworkWeights, X, target, head: str):
    """Loss and its gradient for every parameter, in ``parameters()`` order."""
    return _loss_and_gradients(net.parameters(), net.activation, np.asarray(X, dtype=np.float64), np.asarray(target, dtype=np.float64), head)


def _loss_and_gradients(params, activation, X, target, head):
    _, d_act = _ACTIVATIONS[activation]
    weights = params[1::2]
    pre, post = _forward(params, activation, X)
    loss = head_loss(post[-1], target, head)
    delta = _output_gradient(post[-1], target, head)
    grads = []
    for m in range(len(weights) - 1, -1, -1):
        grads.append(delta.T @ post[m])
        grads.append(delta.sum(axis=0))
        if m:
            delta = (delta @ weights[m]) * d_act(pre[m - 1], post[m])
    grads.reverse()
    return loss, grads


# --------------------------------------------------------------------------
# initialization and transfer
# --------------------------------------------------------------------------


def initialize_weights(layer_sizes: Sequence[int], output_bias, seed, activation: str = "tanh") -> NetworkWeights:
    """Glorot-uniform weights, zero hidden biases, given output bias."""
    rng = np.random.default_rng(seed)
    biases, weights = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    out = np.broadcast_to(np.asarray(output_bias, dtype=np.float64), (layer_sizes[-1],)).copy()
    biases[-1] = out
    return NetworkWeights(tuple(biases), tuple(weights), activation)


def transfer_weights(previous: NetworkWeights | None, layer_sizes, output_bias, seed, activation: str = "tanh") -> NetworkWeights:
    """Previous weights unchanged when present, a fresh initialization otherwise."""
    if previous is not None:
        if tuple(previous.layer_sizes) != tuple(layer_sizes):
            raise ContractError("previous network has a different architecture")
        return previous
    return initialize_weights(layer_sizes, output_bias, seed, activation)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


class TrainTrace(NamedTuple):
    """Validation loss per epoch, index 0 being the initial weights."""

    val_loss: list
    best_epoch: int
    epochs_run: int


def _check_target(target, n, head):
    if head == "occurrence":
        t = check_counts(target, n)
    elif head == "reporting":
        t = check_counts(target, n, ndim=2)
    else:
        raise ContractError(f"unknown head {head!r}")
    return t


def train_network(
    init: NetworkWeights,
    X_train,
    target_train,
    X_val,
    target_val,
    head: str,
    epochs: int,
    batch_size: int,
    learning_rate: float,
    patience: int,
    seed,
):
    """Mini-batch Adam on the summed loss with early stopping on validation loss.

    Returns ``(best weights, trace)``; the initial weights count as epoch 0.
    """
    X_train = np.asarray(X_train, dtype=np.float64)
    X_val = np.asarray(X_val, dtype=np.float64)
    if X_train.shape[1] != init.n_inputs or X_val.shape[1] != init.n_inputs:
        raise ContractError("feature width does not match the network input layer")
    y_train = _check_target(target_train, X_train.shape[0], head)
    y_val = _check_target(target_val, X_val.shape[0], head)
    if batch_size < 1:
        raise ContractError("batch_size must be positive")
    rng = np.random.default_rng(seed)

    params = [p.copy() for p in init.parameters()]
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    step = 0
    best = init
    history = [head_loss(forward(init, X_val), y_val, head)]
    best_epoch = 0
    n = X_train.shape[0]
    epoch = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        for b, start in enumerate(range(0, n, batch_size)):
            rows = order[start : start + batch_size]
            loss, grads = _loss_and_gradients(params, init.activation, X_train[rows], y_train[rows], head)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise DivergenceError(f"non-finite {head} network loss at epoch {epoch}, batch {b}")
            step += 1
            c1 = 1.0 - ADAM_BETA1**step
            c2 = 1.0 - ADAM_BETA2**step
            for k, g in enumerate(grads):
                m1[k] = ADAM_BETA1 * m1[k] + (1.0 - ADAM_BETA1) * g
                m2[k] = ADAM_BETA2 * m2[k] + (1.0 - ADAM_BETA2) * g * g
                params[k] = params[k] - learning_rate * (m1[k] / c1) / (np.sqrt(m2[k] / c2) + ADAM_EPS)
        val = head_loss(_forward(params, init.activation, X_val)[1][-1], y_val, head)
        if not np.isfinite(val):
            raise DivergenceError(f"non-finite {head} validation loss at epoch {epoch}")
        history.append(val)
        if val < history[best_epoch]:
            best_epoch, best = epoch, NetworkWeights.from_parameters(params, init.activation)
        elif patience > 0 and epoch - best_epoch >= patience:
            break
    return best, TrainTrace(history, best_epoch, epoch)
