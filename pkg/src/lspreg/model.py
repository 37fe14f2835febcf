"""Fully connected ReLU classifiers and the softmax cross-entropy loss."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ConfigError, FormatError, ShapeError
from .numerics import Tensor

MODEL_MAGIC = b"LSPM"
MODEL_VERSION = 1
LOG_PROB_FLOOR = float(np.log(1e-300))


@dataclass
class MlpModel:
    layer_dims: list[int]
    weights: list[Tensor] = field(repr=False)
    biases: list[Tensor] = field(repr=False)

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("layer count does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layer_dims[i], self.layer_dims[i + 1])
            if w.shape != want or b.shape != (want[1],):
                raise ShapeError(f"layer {i}: weight {w.shape}, bias {b.shape}, expected {want}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    def param_names(self) -> list[str]:
        names = []
        for i in range(self.n_layers):
            names += [f"W{i}", f"b{i}"]
        return names

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        kind, i = name[0], int(name[1:])
        t = Tensor(value, requires_grad=True)
        target = self.weights if kind == "W" else self.biases
        if t.shape != target[i].shape:
            raise ShapeError(f"{name}: new shape {t.shape} != {target[i].shape}")
        target[i] = t

    def copy(self) -> "MlpModel":
        return MlpModel(list(self.layer_dims),
                        [Tensor(w.data, requires_grad=True) for w in self.weights],
                        [Tensor(b.data, requires_grad=True) for b in self.biases])

    def __call__(self, x) -> Tensor:
        return logits(self, x)


class Identity:
    """Pass-through feature extractor: the input metric is the raw-input metric."""

    def __call__(self, x) -> Tensor:
        return nx.as_tensor(x)

    def __repr__(self) -> str:
        return "Identity()"


@dataclass
class Prediction:
    logits: Tensor
    probabilities: Tensor
    predicted_label: np.ndarray


def init_model(layer_dims, seed: int) -> MlpModel:
    dims = list(layer_dims)
    if len(dims) < 2:
        raise ConfigError(f"need at least input and output dims, got {dims}")
    if any(int(d) != d or d <= 0 for d in dims):
        raise ConfigError(f"layer dims must be positive integers, got {dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        weights.append(Tensor(w, requires_grad=True))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return MlpModel(dims, weights, biases)


def logits(model: MlpModel, x) -> Tensor:
    x = nx.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != model.layer_dims[0]:
        raise ShapeError(f"input shape {x.shape} does not match input dim {model.layer_dims[0]}")
    h = x
    last = model.n_layers - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = nx.add(nx.matmul(h, w), b)
        if i < last:
            h = nx.relu(h)
    return h


def forward(model: MlpModel, x) -> Prediction:
    z = logits(model, x)
    p = nx.softmax(z)
    return Prediction(z, p, np.argmax(z.data, axis=1))


def predict_labels(model: MlpModel, x) -> np.ndarray:
    return np.argmax(logits(model, x).data, axis=1)


def _check_labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n_rows,):
        raise ShapeError(f"labels shape {y.shape}, expected ({n_rows},)")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ConfigError(f"labels must lie in [0, {n_classes})")
    return y.astype(np.intp)


def one_hot(labels, n_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.intp)
    out = np.zeros((y.size, n_classes))
    out[np.arange(y.size), y] = 1.0
    return out


def cross_entropy(pred: Prediction | Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true class.

    Accepts a :class:`Prediction` or raw logits. Log-probabilities are floored
    at ``ln(1e-300)``.
    """
    z = pred.logits if isinstance(pred, Prediction) else pred
    y = _check_labels(labels, z.shape[0], z.shape[1])
    logp = nx.clamp(nx.log_softmax(z), lo=LOG_PROB_FLOOR)
    picked = nx.sum_(nx.mul(logp, one_hot(y, z.shape[1])), axis=1)
    return nx.neg(nx.mean(picked))


def soft_cross_entropy(pred: Prediction | Tensor, targets) -> Tensor:
    """Cross-entropy against per-row probability targets (used by mixup)."""
    z = pred.logits if isinstance(pred, Prediction) else pred
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != z.shape:
        raise ShapeError(f"targets {t.shape} vs logits {z.shape}")
    logp = nx.clamp(nx.log_softmax(z), lo=LOG_PROB_FLOOR)
    return nx.neg(nx.mean(nx.sum_(nx.mul(logp, t), axis=1)))


# -- checkpoint container -----------------------------------------------------

def model_to_bytes(model: MlpModel) -> bytes:
    dims = model.layer_dims
    parts = [MODEL_MAGIC, struct.pack("<HI", MODEL_VERSION, len(dims)),
             struct.pack(f"<{len(dims)}I", *dims)]
    for w, b in zip(model.weights, model.biases):
        parts.append(w.data.astype("<f8").tobytes())
        parts.append(b.data.astype("<f8").tobytes())
    return b"".join(parts)


def model_from_bytes(blob: bytes) -> MlpModel:
    if blob[:4] != MODEL_MAGIC:
        raise FormatError("not a model checkpoint (bad magic)")
    try:
        version, n_dims = struct.unpack_from("<HI", blob, 4)
    except struct.error:
        raise FormatError("truncated model header") from None
    if version != MODEL_VERSION:
        raise FormatError(f"model checkpoint version {version}, expected {MODEL_VERSION}")
    off = 4 + struct.calcsize("<HI")
    try:
        dims = list(struct.unpack_from(f"<{n_dims}I", blob, off))
    except struct.error:
        raise FormatError("truncated model header") from None
    off += 4 * n_dims
    need = sum(a * b + b for a, b in zip(dims[:-1], dims[1:])) * 8
    if len(blob) - off != need:
        raise FormatError(f"model payload is {len(blob) - off} bytes, expected {need}")
    weights, biases = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(blob, "<f8", a * b, off).reshape(a, b)
        off += 8 * a * b
        bias = np.frombuffer(blob, "<f8", b, off)
        off += 8 * b
        weights.append(Tensor(w.astype(np.float64), requires_grad=True))
        biases.append(Tensor(bias.astype(np.float64), requires_grad=True))
    return MlpModel(dims, weights, biases)


def save_model(model: MlpModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> MlpModel:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"model checkpoint not found: {p}")
    return model_from_bytes(p.read_bytes())
