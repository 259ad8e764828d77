"""Dense feed-forward classifier with hand-written gradients.

Parameters are kept as a flat list ``[W0, b0, W1, b1, ...]`` where ``W`` has
shape ``(fan_in, fan_out)``; gradients, momentum buffers and SalUn masks use
the same ordering.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")

_MAGIC = b"UNLABCKPT1\n"


class ShapeError(ValueError):
    """Raised when arrays do not fit the network they are fed to."""


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ShapeError(f"inputs must be 2-D, got shape {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ShapeError("one label per input row required")
        if np.isnan(self.inputs).any():
            raise ValueError("NaN in batch inputs")

    def __len__(self):
        return self.inputs.shape[0]


@dataclass
class ModelState:
    layer_dims: list[int]
    params: list[np.ndarray]
    momentum: list[np.ndarray]
    seed: int
    activation: str = "relu"

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    def weights(self, layer: int) -> np.ndarray:
        return self.params[2 * layer]

    def bias(self, layer: int) -> np.ndarray:
        return self.params[2 * layer + 1]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "ModelState":
        return ModelState(
            list(self.layer_dims),
            [p.copy() for p in self.params],
            [m.copy() for m in self.momentum],
            self.seed,
            self.activation,
        )

    def zero_momentum(self) -> "ModelState":
        out = self.copy()
        out.momentum = [np.zeros_like(p) for p in self.params]
        return out

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def equals(self, other: "ModelState") -> bool:
        """Bit-level equality of architecture, parameters and buffers."""
        if self.layer_dims != other.layer_dims or self.activation != other.activation:
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.params + self.momentum, other.params + other.momentum)
        )


def init_model(layer_dims, seed: int, activation: str = "relu") -> ModelState:
    """Glorot-uniform weights, zero biases, zero momentum."""
    layer_dims = [int(d) for d in layer_dims]
    if len(layer_dims) < 2 or min(layer_dims) < 1:
        raise ValueError(f"layer_dims must hold >= 2 positive sizes, got {layer_dims}")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    params = []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    momentum = [np.zeros_like(p) for p in params]
    return ModelState(layer_dims, params, momentum, int(seed), activation)


def _act(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _act_grad(z, a, kind):
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def _check_inputs(model: ModelState, inputs: np.ndarray):
    if inputs.ndim != 2 or inputs.shape[1] != model.input_dim:
        raise ShapeError(
            f"model expects input_dim={model.input_dim}, got array of shape {inputs.shape}"
        )


def _forward_cache(model: ModelState, inputs: np.ndarray):
    _check_inputs(model, inputs)
    pre, post = [], [inputs]
    h = inputs
    for layer in range(model.n_layers):
        z = h @ model.weights(layer) + model.bias(layer)
        pre.append(z)
        if layer < model.n_layers - 1:
            h = _act(z, model.activation)
            post.append(h)
        else:
            h = z
    return pre, post


def forward(model: ModelState, batch) -> np.ndarray:
    """Logits, one row per example. Accepts a Batch or a bare input matrix."""
    inputs = batch.inputs if isinstance(batch, Batch) else np.asarray(batch, dtype=np.float64)
    pre, _ = _forward_cache(model, inputs)
    return pre[-1]


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, float]:
    """Softmax probabilities and mean cross-entropy of the true labels."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(len(labels)), labels]))
    return np.exp(logp), loss


def per_example_loss(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    logp = log_softmax(logits)
    return -logp[np.arange(len(labels)), labels]


def _backprop(model: ModelState, inputs, labels, want_input=False):
    pre, post = _forward_cache(model, inputs)
    n = inputs.shape[0]
    probs = softmax(pre[-1])
    delta = probs
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    grads = [None] * len(model.params)
    for layer in reversed(range(model.n_layers)):
        grads[2 * layer] = post[layer].T @ delta
        grads[2 * layer + 1] = delta.sum(axis=0)
        if layer > 0 or want_input:
            delta = delta @ model.weights(layer).T
            if layer > 0:
                delta = delta * _act_grad(pre[layer - 1], post[layer], model.activation)
    return grads, (delta if want_input else None)


def backward(model: ModelState, batch: Batch) -> list[np.ndarray]:
    """Gradient of the mean cross-entropy w.r.t. every parameter."""
    grads, _ = _backprop(model, batch.inputs, batch.labels)
    return grads


def input_gradients(model: ModelState, batch: Batch) -> np.ndarray:
    """Row i holds d loss_i / d x_i for each example of the batch."""
    _, dx = _backprop(model, batch.inputs, batch.labels, want_input=True)
    # _backprop scales by 1/n for the mean loss; undo it for per-example grads
    return dx * len(batch)


def input_gradient(model: ModelState, example: Batch) -> np.ndarray:
    if len(example) != 1:
        raise ShapeError("input_gradient takes a single example")
    return input_gradients(model, example)[0]


def sgd_update_(model: ModelState, grads, lr, momentum=0.0, weight_decay=0.0,
                l1_gamma=0.0, mask=None) -> None:
    """In-place form of :func:`sgd_step`."""
    for k, (w, g, buf) in enumerate(zip(model.params, grads, model.momentum)):
        d = g
        if weight_decay:
            d = d + weight_decay * w
        if l1_gamma:
            d = d + l1_gamma * np.sign(w)
        if mask is None:
            buf *= momentum
            buf += d
            w -= lr * buf
        else:
            m = mask[k]
            buf[m] = momentum * buf[m] + d[m]
            w[m] -= lr * buf[m]


def sgd_step(model: ModelState, grads, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0, l1_gamma: float = 0.0, mask=None) -> ModelState:
    """One momentum-SGD step; returns a new ModelState.

    buffer <- momentum * buffer + (grad + weight_decay * w + l1_gamma * sign(w))
    w      <- w - lr * buffer

    Entries where ``mask`` is False keep both weight and buffer untouched.
    """
    if not lr > 0:
        raise ValueError("lr must be positive")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    if weight_decay < 0 or l1_gamma < 0:
        raise ValueError("weight_decay and l1_gamma must be non-negative")
    out = model.copy()
    sgd_update_(out, grads, lr, momentum, weight_decay, l1_gamma, mask)
    return out


def save_checkpoint(model: ModelState, path, meta: dict | None = None) -> None:
    """Header of JSON metadata, then every array as little-endian float64.

    ``meta`` is stored verbatim in the header and ignored on load.
    """
    header = {
        "layer_dims": model.layer_dims,
        "seed": model.seed,
        "activation": model.activation,
    }
    if meta:
        header["meta"] = meta
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in model.params + model.momentum:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelState:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(_MAGIC)
    (hlen,) = struct.unpack("<I", raw[pos:pos + 4])
    pos += 4
    header = json.loads(raw[pos:pos + hlen])
    pos += hlen
    model = init_model(header["layer_dims"], header["seed"], header["activation"])
    arrays = model.params + model.momentum
    for arr in arrays:
        nbytes = arr.size * 8
        if pos + nbytes > len(raw):
            raise ValueError(f"{path}: truncated checkpoint")
        arr[...] = np.frombuffer(raw[pos:pos + nbytes], dtype="<f8").reshape(arr.shape)
        pos += nbytes
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return model
