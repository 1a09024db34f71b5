"""Feed-forward enlargement of embeddings into a bounded higher dimension.

Two construction paths share one inference type:

* ``train_enlargement`` trains a ReLU stack ending in a tanh layer (output in
  [-1, 1]) with an identity-classification softmax head, batch normalization,
  inverted dropout and AdaDelta. The head is discarded afterwards and batch
  normalization is applied with frozen running statistics, so inference is a
  deterministic pure function.
* ``random_enlargement`` builds a seeded single tanh layer with Gaussian
  weights (variance 1/d) for desk-scale runs that need no training data.

Networks serialize to a versioned binary file (magic ``NENL``) whose SHA-256
content fingerprint ties galleries to the exact network that enrolled them.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .data import EnlargedEmbedding
from .errors import ComputationError, ParseError, ValidationError

NETWORK_MAGIC = b"NENL"
NETWORK_VERSION = 1

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.9
_ACTIVATION_CODES = {"relu": 0, "tanh": 1, "linear": 2}
_ACTIVATION_NAMES = {v: n for n, v in _ACTIVATION_CODES.items()}


@dataclass(frozen=True)
class BatchNormStats:
    """Frozen normalization statistics (running mean/variance, scale, shift)."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray

    def folded(self):
        """Return (scale, shift) equivalent to the frozen normalization."""
        scale = self.gamma / np.sqrt(self.var + _BN_EPS)
        return scale, self.beta - self.mean * scale


@dataclass(frozen=True)
class Layer:
    weights: np.ndarray  # (fan_in, fan_out) float64
    bias: np.ndarray  # (fan_out,) float64
    activation: str
    batchnorm: BatchNormStats | None = None

    def __post_init__(self):
        if self.activation not in _ACTIVATION_CODES:
            raise ValidationError(f"unknown activation {self.activation!r}")
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[1],):
            raise ValidationError(
                f"layer shapes inconsistent: weights {w.shape}, bias {b.shape}"
            )
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)


def _apply_activation(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


@dataclass(frozen=True)
class EnlargementNetwork:
    """Inference-mode network: immutable, deterministic, dropout disabled."""

    layers: tuple

    def __post_init__(self):
        if not self.layers:
            raise ValidationError("network needs at least one layer")
        if self.layers[-1].activation != "tanh":
            raise ValidationError("final layer must use tanh")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weights.shape[1] != b.weights.shape[0]:
                raise ValidationError("layer fan_in/fan_out mismatch")
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def input_dim(self):
        return self.layers[0].weights.shape[0]

    @property
    def output_dim(self):
        return self.layers[-1].weights.shape[1]

    def forward(self, matrix):
        """Apply the network to a (n, d) matrix; returns (n, L) in [-1, 1]."""
        h = np.asarray(matrix, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise ValidationError(
                f"input has shape {h.shape}, network expects (n, {self.input_dim})"
            )
        for layer in self.layers:
            z = h @ layer.weights + layer.bias
            if layer.batchnorm is not None:
                scale, shift = layer.batchnorm.folded()
                z = z * scale + shift
            h = _apply_activation(layer.activation, z)
        return h

    @property
    def fingerprint(self):
        return hashlib.sha256(_serialize_payload(self)).digest()


def enlarge(network, embedding):
    """Enlarge one embedding; pure function of (network, embedding)."""
    if embedding.dim != network.input_dim:
        raise ValidationError(
            f"embedding has d={embedding.dim}, network expects {network.input_dim}"
        )
    values = network.forward(embedding.values[None, :].astype(np.float64))[0]
    return EnlargedEmbedding(
        subject_id=embedding.subject_id,
        capture_id=embedding.capture_id,
        values=values,
    )


def enlarge_batch(network, embeddings):
    """Enlarge a list of embeddings in one pass, preserving order."""
    if not embeddings:
        return []
    matrix = np.stack([e.values for e in embeddings]).astype(np.float64)
    out = network.forward(matrix)
    return [
        EnlargedEmbedding(e.subject_id, e.capture_id, row)
        for e, row in zip(embeddings, out)
    ]


def random_enlargement(d, length, seed):
    """Seeded single-layer tanh projection with Gaussian (variance 1/d) weights."""
    if d < 1:
        raise ValidationError(f"d must be at least 1, got {d}")
    if length < d:
        raise ValidationError(f"L must be at least d ({d}), got {length}")
    rng = np.random.default_rng(seed)
    weights = rng.normal(0.0, np.sqrt(1.0 / d), size=(d, length))
    return EnlargementNetwork(
        layers=(Layer(weights=weights, bias=np.zeros(length), activation="tanh"),)
    )


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainingConfig:
    """Hyperparameters for the identity-classification training run.

    Defaults follow the production recipe (AdaDelta lr=0.5 over 50 epochs,
    dropout 0.5, batch size 64, normalization on, hidden widths 256/512);
    desk-scale runs typically shrink epochs and widths and may disable
    batch normalization where batch statistics get unstable.
    """

    epochs: int = 50
    learning_rate: float = 0.5
    rho: float = 0.95
    epsilon: float = 1e-6
    dropout: float = 0.5
    batch_size: int = 64
    batchnorm: bool = True
    hidden_widths: tuple = (256, 512)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError(f"epochs must be at least 1, got {self.epochs}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.batch_size < 1:
            raise ValidationError("batch size must be positive")


class _TrainModel:
    """Mutable training-time network: main stack plus softmax head.

    Parameters live in per-layer dicts so the gradient check can walk every
    trainable array uniformly.
    """

    def __init__(self, dims, activations, batchnorm, n_classes, rng):
        self.activations = list(activations)
        self.batchnorm = batchnorm
        self.params = []
        self.running = []
        for fan_in, fan_out, act in zip(dims, dims[1:], self.activations):
            if act == "relu":  # He-style
                std = np.sqrt(2.0 / fan_in)
            else:  # Xavier-style for tanh
                std = np.sqrt(2.0 / (fan_in + fan_out))
            layer = {
                "W": rng.normal(0.0, std, size=(fan_in, fan_out)),
                "b": np.zeros(fan_out),
            }
            if batchnorm:
                layer["gamma"] = np.ones(fan_out)
                layer["beta"] = np.zeros(fan_out)
            self.params.append(layer)
            self.running.append(
                {"mean": np.zeros(fan_out), "var": np.ones(fan_out)}
                if batchnorm
                else None
            )
        head_in, head_out = dims[-1], n_classes
        std = np.sqrt(2.0 / (head_in + head_out))
        self.head = {
            "W": rng.normal(0.0, std, size=(head_in, head_out)),
            "b": np.zeros(head_out),
        }

    def all_params(self):
        out = []
        for i, layer in enumerate(self.params):
            out += [(f"layer{i}.{k}", layer[k]) for k in sorted(layer)]
        out += [(f"head.{k}", self.head[k]) for k in sorted(self.head)]
        return out

    def forward(self, X, dropout_p, rng, update_running=False):
        """Training-mode forward pass; returns (logits, cache for backward)."""
        h = X
        caches = []
        for layer, running, act in zip(self.params, self.running, self.activations):
            z = h @ layer["W"] + layer["b"]
            cache = {"h_in": h, "z": z}
            if self.batchnorm:
                mean = z.mean(axis=0)
                var = z.var(axis=0)  # biased, matches normalization
                inv_std = 1.0 / np.sqrt(var + _BN_EPS)
                zhat = (z - mean) * inv_std
                zbn = layer["gamma"] * zhat + layer["beta"]
                cache.update(zhat=zhat, inv_std=inv_std)
                if update_running:
                    running["mean"] = (
                        _BN_MOMENTUM * running["mean"] + (1 - _BN_MOMENTUM) * mean
                    )
                    running["var"] = (
                        _BN_MOMENTUM * running["var"] + (1 - _BN_MOMENTUM) * var
                    )
            else:
                zbn = z
            a = _apply_activation(act, zbn)
            cache["a"] = a
            if dropout_p > 0.0:
                mask = (rng.random(a.shape) >= dropout_p) / (1.0 - dropout_p)
                a = a * mask  # inverted dropout: no rescaling at inference
                cache["mask"] = mask
            caches.append(cache)
            h = a
        logits = h @ self.head["W"] + self.head["b"]
        return logits, (caches, h)

    def loss_and_grads(self, X, labels, dropout_p=0.0, rng=None,
                       update_running=False, compute_grads=True):
        """Mean cross-entropy of the softmax head, plus per-parameter grads."""
        n = X.shape[0]
        logits, (caches, h_last) = self.forward(X, dropout_p, rng, update_running)
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss = -log_probs[np.arange(n), labels].mean()
        if not compute_grads:
            return loss, None

        grads = {"head.W": None, "head.b": None}
        dlogits = np.exp(log_probs)
        dlogits[np.arange(n), labels] -= 1.0
        dlogits /= n
        grads["head.W"] = h_last.T @ dlogits
        grads["head.b"] = dlogits.sum(axis=0)
        dh = dlogits @ self.head["W"].T

        for i in range(len(self.params) - 1, -1, -1):
            layer, cache, act = self.params[i], caches[i], self.activations[i]
            if "mask" in cache:
                dh = dh * cache["mask"]
            if act == "relu":
                dzbn = dh * (cache["a"] > 0)
            elif act == "tanh":
                dzbn = dh * (1.0 - cache["a"] ** 2)
            else:
                dzbn = dh
            if self.batchnorm:
                zhat, inv_std = cache["zhat"], cache["inv_std"]
                grads[f"layer{i}.gamma"] = (dzbn * zhat).sum(axis=0)
                grads[f"layer{i}.beta"] = dzbn.sum(axis=0)
                dzhat = dzbn * layer["gamma"]
                b_sz = X.shape[0]
                dz = (inv_std / b_sz) * (
                    b_sz * dzhat
                    - dzhat.sum(axis=0)
                    - zhat * (dzhat * zhat).sum(axis=0)
                )
            else:
                dz = dzbn
            grads[f"layer{i}.W"] = cache["h_in"].T @ dz
            grads[f"layer{i}.b"] = dz.sum(axis=0)
            dh = dz @ layer["W"].T
        return loss, grads

    def to_inference_network(self):
        """Strip the head; freeze running statistics into layer objects."""
        layers = []
        for layer, running, act in zip(self.params, self.running, self.activations):
            bn = None
            if self.batchnorm:
                bn = BatchNormStats(
                    gamma=layer["gamma"].copy(),
                    beta=layer["beta"].copy(),
                    mean=running["mean"].copy(),
                    var=running["var"].copy(),
                )
            layers.append(
                Layer(
                    weights=layer["W"].copy(),
                    bias=layer["b"].copy(),
                    activation=act,
                    batchnorm=bn,
                )
            )
        return EnlargementNetwork(layers=tuple(layers))


class _AdaDelta:
    """Per-array AdaDelta state: accumulated squared grads and updates."""

    def __init__(self, lr, rho, eps):
        self.lr, self.rho, self.eps = lr, rho, eps
        self.sq_grad = {}
        self.sq_update = {}

    def step(self, name, param, grad):
        eg = self.sq_grad.setdefault(name, np.zeros_like(param))
        eu = self.sq_update.setdefault(name, np.zeros_like(param))
        eg *= self.rho
        eg += (1 - self.rho) * grad**2
        update = -np.sqrt(eu + self.eps) / np.sqrt(eg + self.eps) * grad
        eu *= self.rho
        eu += (1 - self.rho) * update**2
        param += self.lr * update


def _build_train_model(d, length, n_classes, config, rng):
    dims = [d, *config.hidden_widths, length]
    activations = ["relu"] * len(config.hidden_widths) + ["tanh"]
    return _TrainModel(dims, activations, config.batchnorm, n_classes, rng)


def train_enlargement(train_embeddings, length, config=None):
    """Train an enlargement network on identity labels.

    Returns ``(network, loss_history)`` where the history holds the mean
    training cross-entropy of each epoch. Deterministic for a fixed config
    seed.
    """
    config = config or TrainingConfig()
    if not train_embeddings:
        raise ValidationError("training set is empty")
    dims = {e.dim for e in train_embeddings}
    if len(dims) != 1:
        raise ValidationError(f"training embeddings have mixed d: {sorted(dims)}")
    subjects = sorted({e.subject_id for e in train_embeddings})
    if len(subjects) < 2:
        raise ValidationError("training requires at least 2 distinct subjects")
    subject_index = {s: i for i, s in enumerate(subjects)}

    X = np.stack([e.values for e in train_embeddings]).astype(np.float64)
    y = np.array([subject_index[e.subject_id] for e in train_embeddings])

    rng = np.random.default_rng(config.seed)
    model = _build_train_model(dims.pop(), length, len(subjects), config, rng)
    optimizer = _AdaDelta(config.learning_rate, config.rho, config.epsilon)

    n = X.shape[0]
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        seen = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if config.batchnorm and len(idx) < 2:
                continue  # a single sample has no usable batch statistics
            loss, grads = model.loss_and_grads(
                X[idx], y[idx], dropout_p=config.dropout, rng=rng,
                update_running=True,
            )
            if not np.isfinite(loss):
                raise ComputationError(f"non-finite training loss at epoch {epoch}")
            epoch_loss += loss * len(idx)
            seen += len(idx)
            for name, param in model.all_params():
                optimizer.step(name, param, grads[name])
        if seen == 0:
            raise ValidationError(
                "every batch was dropped; use batchnorm=False or more samples"
            )
        history.append(epoch_loss / seen)
    return model.to_inference_network(), history


# ---------------------------------------------------------------------------
# Serialization


def _serialize_payload(network):
    parts = [NETWORK_MAGIC, struct.pack("<HB", NETWORK_VERSION, len(network.layers))]
    for layer in network.layers:
        fan_in, fan_out = layer.weights.shape
        parts.append(
            struct.pack(
                "<IIBB",
                fan_in,
                fan_out,
                _ACTIVATION_CODES[layer.activation],
                1 if layer.batchnorm is not None else 0,
            )
        )
        parts.append(layer.weights.astype("<f8").tobytes())
        parts.append(layer.bias.astype("<f8").tobytes())
        if layer.batchnorm is not None:
            for arr in (layer.batchnorm.gamma, layer.batchnorm.beta,
                        layer.batchnorm.mean, layer.batchnorm.var):
                parts.append(arr.astype("<f8").tobytes())
    return b"".join(parts)


def save_network(network, path):
    payload = _serialize_payload(network)
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(hashlib.sha256(payload).digest())


def load_network(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != NETWORK_MAGIC:
        raise ParseError(f"bad magic {data[:4]!r}", path=path, offset=0)
    if len(data) < 7 + 32:
        raise ParseError("truncated network file", path=path)
    payload, digest = data[:-32], data[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise ParseError("network fingerprint does not match contents", path=path)
    version, n_layers = struct.unpack("<HB", payload[4:7])
    if version != NETWORK_VERSION:
        raise ParseError(f"unsupported network version {version}", path=path)
    offset = 7
    layers = []
    for _ in range(n_layers):
        if offset + 10 > len(payload):
            raise ParseError("truncated layer header", path=path)
        fan_in, fan_out, act_code, has_bn = struct.unpack(
            "<IIBB", payload[offset:offset + 10]
        )
        offset += 10
        if act_code not in _ACTIVATION_NAMES:
            raise ParseError(f"unknown activation code {act_code}", path=path)

        def take(count):
            nonlocal offset
            nbytes = count * 8
            if offset + nbytes > len(payload):
                raise ParseError("truncated parameter block", path=path)
            arr = np.frombuffer(payload[offset:offset + nbytes], dtype="<f8")
            offset += nbytes
            return arr

        weights = take(fan_in * fan_out).reshape(fan_in, fan_out)
        bias = take(fan_out)
        bn = None
        if has_bn:
            bn = BatchNormStats(
                gamma=take(fan_out), beta=take(fan_out),
                mean=take(fan_out), var=take(fan_out),
            )
        layers.append(
            Layer(
                weights=weights,
                bias=bias,
                activation=_ACTIVATION_NAMES[act_code],
                batchnorm=bn,
            )
        )
    if offset != len(payload):
        raise ParseError("trailing bytes after final layer", path=path)
    return EnlargementNetwork(layers=tuple(layers))
