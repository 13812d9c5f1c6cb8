"""Retrieval-necessity classifier: a small feed-forward net trained with Adam.

Architecture: two rectified hidden layers and one logistic output unit.
Training minimizes binary cross-entropy and keeps the parameters from the
epoch with the best held-out validation accuracy. Arithmetic is float32;
the gradient functions also run in float64 for checking against finite
differences.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .embedding import SentenceEmbedding
from .errors import FormatError, TrainingDivergedError, ValidationError
from .labeler import LabeledSet

log = logging.getLogger(__name__)

MODEL_MAGIC = b"EIMC"
MODEL_VERSION = 1

PARAM_KEYS = ("W1", "b1", "W2", "b2", "W3", "b3")


@dataclass
class ClassifierModel:
    """Weights plus training metadata. Immutable by convention after training."""

    W1: np.ndarray  # (h1, d)
    b1: np.ndarray  # (h1,)
    W2: np.ndarray  # (h2, h1)
    b2: np.ndarray  # (h2,)
    W3: np.ndarray  # (1, h2)
    b3: np.ndarray  # (1,)
    seed: int = 0
    best_epoch: int = 1
    val_accuracy: float = float("nan")
    layer: int = 1  # embedding layer the model was trained on

    def __post_init__(self):
        h1, d = self.W1.shape
        h2 = self.W2.shape[0]
        if self.W2.shape != (h2, h1) or self.W3.shape != (1, h2):
            raise ValidationError("weight matrix dimensions do not chain")
        if self.b1.shape != (h1,) or self.b2.shape != (h2,) or self.b3.shape != (1,):
            raise ValidationError("bias vector dimensions do not match")
        for key in PARAM_KEYS:
            if not np.all(np.isfinite(getattr(self, key))):
                raise ValidationError(f"non-finite values in {key}")

    @property
    def d(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden_dims(self) -> tuple[int, int]:
        return (self.W1.shape[0], self.W2.shape[0])

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_KEYS}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 50
    batch_size: int = 32
    val_fraction: float = 0.1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")
        if self.max_epochs < 1:
            raise ValidationError("max_epochs must be >= 1")
        if not (0.0 < self.val_fraction < 1.0):
            raise ValidationError("val_fraction must be in (0, 1)")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")


@dataclass
class TrainingLog:
    epoch_losses: list[float] = field(default_factory=list)
    val_accuracies: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_accuracy: float = float("nan")
    notes: str = ""


def init_model(d: int, h1: int = 256, h2: int = 64, seed: int = 0) -> ClassifierModel:
    """Glorot-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases."""
    if min(d, h1, h2) < 1:
        raise ValidationError("all layer sizes must be >= 1")
    rng = np.random.default_rng(seed)

    def glorot(fan_out, fan_in):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(np.float32)

    return ClassifierModel(
        W1=glorot(h1, d),
        b1=np.zeros(h1, dtype=np.float32),
        W2=glorot(h2, h1),
        b2=np.zeros(h2, dtype=np.float32),
        W3=glorot(1, h2),
        b3=np.zeros(1, dtype=np.float32),
        seed=seed,
    )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward_batch(params: dict[str, np.ndarray], X: np.ndarray) -> np.ndarray:
    """Probabilities for a batch, shape (n,)."""
    a1 = np.maximum(X @ params["W1"].T + params["b1"], 0.0)
    a2 = np.maximum(a1 @ params["W2"].T + params["b2"], 0.0)
    z3 = a2 @ params["W3"].T + params["b3"]
    return _sigmoid(z3[:, 0])


def forward(model: ClassifierModel, x) -> float:
    """Probability that retrieval helps, for one embedding."""
    values = x.values if isinstance(x, SentenceEmbedding) else np.asarray(x)
    if values.shape != (model.d,):
        raise ValidationError(f"input dimension {values.shape} does not match model d={model.d}")
    return float(forward_batch(model.params(), values[None, :].astype(model.W1.dtype))[0])


def decide(model: ClassifierModel, x, threshold: float = 0.5) -> int:
    """1 iff forward(model, x) >= threshold."""
    if not (0.0 < threshold < 1.0):
        raise ValidationError(f"threshold must be in (0, 1), got {threshold}")
    return int(forward(model, x) >= threshold)


def loss_and_grads(
    params: dict[str, np.ndarray], X: np.ndarray, y: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean binary cross-entropy and its gradients w.r.t. every parameter.

    Uses the softplus identity BCE = mean(softplus(z) - y*z) for numerical
    stability. Runs in whatever dtype the inputs carry.
    """
    n = X.shape[0]
    z1 = X @ params["W1"].T + params["b1"]
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ params["W2"].T + params["b2"]
    a2 = np.maximum(z2, 0.0)
    z3 = (a2 @ params["W3"].T + params["b3"])[:, 0]
    loss = float(np.mean(np.logaddexp(0.0, z3) - y * z3))

    dz3 = (_sigmoid(z3) - y) / n  # (n,)
    gW3 = dz3[None, :] @ a2  # (1, h2)
    gb3 = np.array([dz3.sum()], dtype=X.dtype)
    da2 = dz3[:, None] @ params["W3"]  # (n, h2)
    dz2 = da2 * (z2 > 0)
    gW2 = dz2.T @ a1
    gb2 = dz2.sum(axis=0)
    da1 = dz2 @ params["W2"]
    dz1 = da1 * (z1 > 0)
    gW1 = dz1.T @ X
    gb1 = dz1.sum(axis=0)
    return loss, {"W1": gW1, "b1": gb1, "W2": gW2, "b2": gb2, "W3": gW3, "b3": gb3}


def _stratified_val_split(
    y: np.ndarray, val_fraction: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Indices (train, val), stratified by label."""
    train_idx, val_idx = [], []
    for cls in (0, 1):
        cls_idx = np.flatnonzero(y == cls)
        if cls_idx.size == 0:
            continue
        perm = rng.permutation(cls_idx)
        n_val = int(round(val_fraction * cls_idx.size))
        if cls_idx.size > 1:
            n_val = max(1, n_val)
        val_idx.extend(perm[:n_val].tolist())
        train_idx.extend(perm[n_val:].tolist())
    return np.array(sorted(train_idx)), np.array(sorted(val_idx))


def _labeled_arrays(data: LabeledSet, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([ex.embedding.values for ex in data]).astype(dtype)
    y = np.array([ex.label for ex in data], dtype=dtype)
    return X, y


def train(
    model: ClassifierModel, data: LabeledSet, cfg: TrainConfig = None
) -> tuple[ClassifierModel, TrainingLog]:
    """Adam on BCE with per-epoch validation; returns the best-epoch model.

    A single-class training portion short-circuits to a constant-prior
    model (zero weights, output bias at the prior log-odds) with a warning.
    """
    cfg = cfg or TrainConfig()
    if len(data) < 2:
        raise ValidationError("need at least 2 labeled examples")
    X, y = _labeled_arrays(data)
    if X.shape[1] != model.d:
        raise ValidationError(f"embedding dim {X.shape[1]} does not match model d={model.d}")
    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = _stratified_val_split(y, cfg.val_fraction, rng)
    X_tr, y_tr = X[train_idx], y[train_idx]
    X_val, y_val = X[val_idx], y[val_idx]
    src_layer = data.examples[0].embedding.layer

    if len(np.unique(y_tr)) < 2:
        prior = float(y_tr.mean()) if y_tr.size else 0.5
        prior = min(max(prior, 1e-6), 1.0 - 1e-6)
        log.warning("single-class training data; returning constant-prior model (p=%.4f)", prior)
        constant = ClassifierModel(
            W1=np.zeros_like(model.W1),
            b1=np.zeros_like(model.b1),
            W2=np.zeros_like(model.W2),
            b2=np.zeros_like(model.b2),
            W3=np.zeros_like(model.W3),
            b3=np.array([math.log(prior / (1.0 - prior))], dtype=np.float32),
            seed=cfg.seed,
            best_epoch=1,
            val_accuracy=_accuracy(np.zeros_like(model.b3), X_val, y_val, prior),
            layer=src_layer,
        )
        return constant, TrainingLog(best_epoch=1, notes="single-class training data")

    params = {k: v.copy() for k, v in model.params().items()}
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(p) for k, p in params.items()}
    t = 0
    training_log = TrainingLog()
    best = {"epoch": 0, "acc": -1.0, "params": None}

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(X_tr))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            loss, grads = loss_and_grads(params, X_tr[batch], y_tr[batch])
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch offset {start}"
                )
            epoch_losses.append(loss)
            t += 1
            bc1 = 1.0 - cfg.beta1**t
            bc2 = 1.0 - cfg.beta2**t
            for key in PARAM_KEYS:
                g = grads[key]
                m[key] = cfg.beta1 * m[key] + (1.0 - cfg.beta1) * g
                v[key] = cfg.beta2 * v[key] + (1.0 - cfg.beta2) * g * g
                step = cfg.learning_rate * (m[key] / bc1) / (np.sqrt(v[key] / bc2) + cfg.eps)
                params[key] = (params[key] - step).astype(np.float32)
        val_pred = forward_batch(params, X_val) >= 0.5
        val_acc = float(np.mean(val_pred == (y_val >= 0.5)))
        training_log.epoch_losses.append(float(np.mean(epoch_losses)))
        training_log.val_accuracies.append(val_acc)
        if val_acc > best["acc"]:
            best = {"epoch": epoch, "acc": val_acc, "params": {k: p.copy() for k, p in params.items()}}

    training_log.best_epoch = best["epoch"]
    training_log.best_val_accuracy = best["acc"]
    trained = ClassifierModel(
        **best["params"],
        seed=cfg.seed,
        best_epoch=best["epoch"],
        val_accuracy=best["acc"],
        layer=src_layer,
    )
    return trained, training_log


def _accuracy(b3: np.ndarray, X_val: np.ndarray, y_val: np.ndarray, prior: float) -> float:
    if y_val.size == 0:
        return float("nan")
    pred = np.full(y_val.shape, prior >= 0.5)
    return float(np.mean(pred == (y_val >= 0.5)))


def save_model(model: ClassifierModel, path) -> None:
    """Binary model file: magic `EIMC`, header, then row-major float32 arrays."""
    h1, h2 = model.hidden_dims
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(
            struct.pack(
                "<IIIIqIfI",
                MODEL_VERSION,
                model.d,
                h1,
                h2,
                model.seed,
                model.best_epoch,
                model.val_accuracy,
                model.layer,
            )
        )
        for key in PARAM_KEYS:
            fh.write(np.ascontiguousarray(getattr(model, key), dtype="<f4").tobytes())


def load_model(path) -> ClassifierModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MODEL_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MODEL_MAGIC!r}")
    header = "<IIIIqIfI"
    try:
        version, d, h1, h2, seed, best_epoch, val_acc, layer = struct.unpack_from(header, data, 4)
    except struct.error as exc:
        raise FormatError("truncated model header") from exc
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}")
    offset = 4 + struct.calcsize(header)
    shapes = {"W1": (h1, d), "b1": (h1,), "W2": (h2, h1), "b2": (h2,), "W3": (1, h2), "b3": (1,)}
    arrays = {}
    for key, shape in shapes.items():
        count = int(np.prod(shape))
        raw = data[offset : offset + 4 * count]
        if len(raw) != 4 * count:
            raise FormatError(f"truncated array {key}")
        arrays[key] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        offset += 4 * count
    return ClassifierModel(
        **arrays, seed=seed, best_epoch=best_epoch, val_accuracy=val_acc, layer=layer
    )
