"""One-hidden-layer MLP over bag-of-features histograms.

The hidden layer has ceil((m + t) / 2) sigmoid units for t input bins and
m identities; the output layer is softmax trained with cross-entropy via
plain backpropagation and mini-batch gradient descent. Training is fully
deterministic given the seed, which fixes both the weight initialization
and the per-epoch shuffling.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DeepBofError,
    DimensionMismatchError,
    DivergenceError,
    PayloadMismatchError,
    TruncatedFileError,
)

MODEL_MAGIC = b"DBM1"
_MODEL_HEADER = struct.Struct("<4sIII")


def hidden_size(num_inputs: int, num_classes: int) -> int:
    """Hidden-unit count rule: ceil((m + t) / 2)."""
    return (num_inputs + num_classes + 1) // 2


@dataclass
class TrainConfig:
    """Gradient-descent schedule. The seed is mandatory: nothing in the
    trainer ever falls back to wall-clock entropy."""

    seed: int
    learning_rate: float = 0.01
    epochs: int = 100
    batch_size: int = 32

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise DeepBofError("learning rate, epochs, and batch size must be positive")


@dataclass
class MlpModel:
    w1: np.ndarray  # (t, h)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h, m)
    b2: np.ndarray  # (m,)
    final_loss: float = field(default=float("nan"))
    loss_history: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def num_inputs(self) -> int:
        return self.w1.shape[0]

    @property
    def num_hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def num_classes(self) -> int:
        return self.w2.shape[1]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _forward(model: MlpModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    hidden = _sigmoid(x @ model.w1 + model.b1)
    logits = hidden @ model.w2 + model.b2
    return hidden, logits


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


def loss_and_gradients(
    model: MlpModel, x: np.ndarray, labels: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy plus gradients for every parameter and for the
    input batch (key ``"x"``, used when training the quantizer jointly)."""
    n = x.shape[0]
    hidden, logits = _forward(model, x)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float((log_z - shifted[np.arange(n), labels]).mean())

    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    d_logits = probs
    d_logits[np.arange(n), labels] -= 1.0
    d_logits /= n

    d_w2 = hidden.T @ d_logits
    d_b2 = d_logits.sum(axis=0)
    d_hidden = d_logits @ model.w2.T
    d_pre = d_hidden * hidden * (1.0 - hidden)
    d_w1 = x.T @ d_pre
    d_b1 = d_pre.sum(axis=0)
    d_x = d_pre @ model.w1.T
    return loss, {"w1": d_w1, "b1": d_b1, "w2": d_w2, "b2": d_b2, "x": d_x}


def init_model(num_inputs: int, num_classes: int, seed: int) -> MlpModel:
    """Weights uniform in +-1/sqrt(fan-in), biases zero, seeded."""
    h = hidden_size(num_inputs, num_classes)
    rng = np.random.default_rng(seed)
    lim1 = 1.0 / np.sqrt(num_inputs)
    lim2 = 1.0 / np.sqrt(h)
    return MlpModel(
        w1=rng.uniform(-lim1, lim1, size=(num_inputs, h)),
        b1=np.zeros(h),
        w2=rng.uniform(-lim2, lim2, size=(h, num_classes)),
        b2=np.zeros(num_classes),
    )


def train(
    histograms: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    num_classes: int | None = None,
) -> MlpModel:
    """Mini-batch gradient descent; deterministic given ``cfg.seed``.

    Requires at least two classes and at least one sample per class.
    ``loss_history`` records the mean batch loss per epoch (measured
    before each update); ``final_loss`` is the full-data loss after the
    last update. A non-finite loss aborts with the offending epoch named.
    """
    x = np.asarray(histograms, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DimensionMismatchError(f"expected (n, t) training inputs, got {x.shape}")
    if labels.shape != (x.shape[0],):
        raise DimensionMismatchError("one label per training sample required")
    m = int(labels.max()) + 1 if num_classes is None else num_classes
    if m < 2:
        raise DeepBofError(f"training needs at least 2 classes, got {m}")
    counts = np.bincount(labels, minlength=m)
    if (counts == 0).any():
        missing = int(np.flatnonzero(counts == 0)[0])
        raise DeepBofError(f"class {missing} has no training samples")

    model = init_model(x.shape[1], m, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    n = x.shape[0]
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = loss_and_gradients(model, x[idx], labels[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            batch_losses.append(loss)
            model.w1 -= cfg.learning_rate * grads["w1"]
            model.b1 -= cfg.learning_rate * grads["b1"]
            model.w2 -= cfg.learning_rate * grads["w2"]
            model.b2 -= cfg.learning_rate * grads["b2"]
        history.append(float(np.mean(batch_losses)))
    model.loss_history = np.asarray(history)
    model.final_loss, _ = loss_and_gradients(model, x, labels)
    return model


def predict(model: MlpModel, histogram: np.ndarray) -> np.ndarray:
    """Class scores for one histogram: non-negative, summing to 1."""
    histogram = np.asarray(histogram, dtype=np.float64)
    if histogram.shape != (model.num_inputs,):
        raise DimensionMismatchError(
            f"histogram length {histogram.shape} does not match t={model.num_inputs}"
        )
    return predict_batch(model, histogram[None, :])[0]


def predict_batch(model: MlpModel, histograms: np.ndarray) -> np.ndarray:
    histograms = np.asarray(histograms, dtype=np.float64)
    if histograms.ndim != 2 or histograms.shape[1] != model.num_inputs:
        raise DimensionMismatchError(
            f"expected (n, {model.num_inputs}) histograms, got {histograms.shape}"
        )
    _, logits = _forward(model, histograms)
    return _softmax(logits)


def save_model(model: MlpModel, path: str | Path) -> None:
    """Write magic ``DBM1``, u32 t, h, m, then W1, b1, W2, b2 as
    little-endian float32 in that order."""
    with open(path, "wb") as fh:
        fh.write(
            _MODEL_HEADER.pack(
                MODEL_MAGIC, model.num_inputs, model.num_hidden, model.num_classes
            )
        )
        for arr in (model.w1, model.b1, model.w2, model.b2):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_model(path: str | Path) -> MlpModel:
    with open(path, "rb") as fh:
        header = fh.read(_MODEL_HEADER.size)
        if len(header) < _MODEL_HEADER.size:
            raise TruncatedFileError(f"{path}: file shorter than the model header")
        magic, t, h, m = _MODEL_HEADER.unpack(header)
        if magic != MODEL_MAGIC:
            raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MODEL_MAGIC!r}")
        counts = (t * h, h, h * m, m)
        expected = 4 * sum(counts)
        payload = fh.read(expected + 1)
    if len(payload) < expected:
        raise TruncatedFileError(f"{path}: model payload shorter than declared")
    if len(payload) > expected:
        raise PayloadMismatchError(f"{path}: trailing bytes after model payload")
    arrays = []
    offset = 0
    for count in counts:
        arrays.append(
            np.frombuffer(payload[offset : offset + 4 * count], dtype="<f4").astype(
                np.float64
            )
        )
        offset += 4 * count
    return MlpModel(
        w1=arrays[0].reshape(t, h),
        b1=arrays[1],
        w2=arrays[2].reshape(h, m),
        b2=arrays[3],
    )
