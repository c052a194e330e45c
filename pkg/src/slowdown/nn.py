"""Fully connected networks, written from scratch on numpy.

Three instances of the same architecture drive the detector: a two-class
softmax classifier that decides whether a window contains a complete slowdown
and two sigmoid regressors that place its start and end as fractions of the
window.  Hidden layers are ReLU; training is plain minibatch SGD with
inverted dropout, and every source of randomness (init, shuffling, masks) is
seeded.  No autodiff framework: gradients are derived by hand and checked
against finite differences in the test suite.
"""

from __future__ import annotations

import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .windows import DatasetSplit, WindowSample

HEAD_CLASSIFIER = "softmax_classifier"
HEAD_REGRESSOR = "sigmoid_regressor"

INPUT_WIDTH = 600
HIDDEN_WIDTH = 70

_PROB_FLOOR = 1e-12

_MODEL_MAGIC = b"SDNN"
_MODEL_VERSION = 1
_HEAD_TAGS = {HEAD_CLASSIFIER: 0, HEAD_REGRESSOR: 1}
_TAG_HEADS = {v: k for k, v in _HEAD_TAGS.items()}


class ShapeMismatch(ValueError):
    """Batch, mask, or target shapes disagree with the model."""


class WrongHead(TypeError):
    """Operation requires the other head type."""


class StaleCache(ValueError):
    """Backward pass received a cache that does not match the model."""


class CorruptModel(ValueError):
    """Model file failed magic, version, size, or checksum validation."""


class DivergedLoss(RuntimeError):
    """Training loss became non-finite; ``report`` holds progress so far."""

    def __init__(self, message: str, report: "TrainReport"):
        super().__init__(message)
        self.report = report


@dataclass
class MlpModel:
    """Weights and biases of a fully connected ReLU network.

    ``weights[k]`` has shape ``(fan_in, fan_out)``; the head determines the
    output nonlinearity (softmax over two logits, or sigmoid on one).
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head: str

    def __post_init__(self) -> None:
        if self.head not in _HEAD_TAGS:
            raise ValueError(f"unknown head {self.head!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be parallel, non-empty lists")
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError("each bias must match its weight matrix fan-out")
        out = self.weights[-1].shape[1]
        expected = 2 if self.head == HEAD_CLASSIFIER else 1
        if out != expected:
            raise ValueError(f"{self.head} needs {expected} outputs, got {out}")

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def clone(self) -> "MlpModel":
        return MlpModel(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.head,
        )

    def predict_proba(self, windows: np.ndarray) -> np.ndarray:
        """Class probabilities, shape ``(n, 2)``; classifier head only."""
        if self.head != HEAD_CLASSIFIER:
            raise WrongHead("predict_proba requires the classifier head")
        out, _ = forward(self, np.atleast_2d(np.asarray(windows, dtype=np.float64)))
        return out

    def predict_fraction(self, windows: np.ndarray) -> np.ndarray:
        """Sigmoid outputs in (0, 1), shape ``(n,)``; regressor head only."""
        if self.head != HEAD_REGRESSOR:
            raise WrongHead("predict_fraction requires the regressor head")
        out, _ = forward(self, np.atleast_2d(np.asarray(windows, dtype=np.float64)))
        return out[:, 0]


def new_model(
    head: str,
    seed: int = 0,
    input_dim: int = INPUT_WIDTH,
    hidden_dims: Sequence[int] = (HIDDEN_WIDTH, HIDDEN_WIDTH),
) -> MlpModel:
    """Seeded fresh model: He-uniform hidden layers, Xavier-uniform output."""
    out_dim = 2 if head == HEAD_CLASSIFIER else 1
    dims = [input_dim, *hidden_dims, out_dim]
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for k in range(len(dims) - 1):
        fan_in, fan_out = dims[k], dims[k + 1]
        if k < len(dims) - 2:
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights, biases, head)


def make_dropout_masks(
    rng: np.random.Generator, rate: float, batch: int, hidden_dims: Sequence[int]
) -> list[np.ndarray] | None:
    """Inverted-dropout masks (0 or ``1/(1-rate)``), one per hidden layer."""
    if rate <= 0.0:
        return None
    return [
        (rng.random((batch, h)) >= rate) / (1.0 - rate) for h in hidden_dims
    ]


@dataclass
class ForwardCache:
    """Intermediate values a backward pass needs; tied to one forward call."""

    inputs: np.ndarray
    pre_acts: list[np.ndarray]
    hidden: list[np.ndarray]  # post-ReLU, post-mask: the next layer's inputs
    masks: list[np.ndarray] | None
    outputs: np.ndarray


def forward(
    model: MlpModel,
    batch: np.ndarray,
    dropout_masks: Sequence[np.ndarray | None] | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Run the network on ``batch`` (rows are windows).

    Dropout masks, when given, apply to the hidden activations (training
    mode); omit them for inference.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.weights[0].shape[0]:
        raise ShapeMismatch(
            f"batch shape {x.shape} incompatible with input width "
            f"{model.weights[0].shape[0]}"
        )
    n_hidden = len(model.weights) - 1
    if dropout_masks is not None and len(dropout_masks) != n_hidden:
        raise ShapeMismatch(f"expected {n_hidden} dropout masks")
    pre_acts, hidden = [], []
    a = x
    for k in range(n_hidden):
        z = a @ model.weights[k] + model.biases[k]
        pre_acts.append(z)
        a = np.maximum(z, 0.0)
        if dropout_masks is not None and dropout_masks[k] is not None:
            mask = dropout_masks[k]
            if mask.shape != a.shape:
                raise ShapeMismatch(f"mask {mask.shape} vs activations {a.shape}")
            a = a * mask
        hidden.append(a)
    logits = a @ model.weights[-1] + model.biases[-1]
    if model.head == HEAD_CLASSIFIER:
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=1, keepdims=True)
    else:
        out = 1.0 / (1.0 + np.exp(-logits))
    cache = ForwardCache(x, pre_acts, hidden, list(dropout_masks) if dropout_masks else None, out)
    return out, cache


def loss(head: str, outputs: np.ndarray, targets: np.ndarray) -> float:
    """Mean cross-entropy (classifier, one-hot targets) or mean squared error."""
    outputs = np.asarray(outputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if outputs.shape != targets.shape:
        raise ShapeMismatch(f"outputs {outputs.shape} vs targets {targets.shape}")
    if head == HEAD_CLASSIFIER:
        probs = np.clip(outputs, _PROB_FLOOR, 1.0 - _PROB_FLOOR)
        return float(-(targets * np.log(probs)).sum(axis=1).mean())
    if head == HEAD_REGRESSOR:
        return float(((outputs - targets) ** 2).mean())
    raise ValueError(f"unknown head {head!r}")


def backward(
    model: MlpModel, cache: ForwardCache, targets: np.ndarray
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Exact gradients of the batch-mean loss for every weight and bias.

    Softmax plus cross-entropy is fused at the output; ReLU and dropout
    gating reuse the cached forward state.
    """
    targets = np.asarray(targets, dtype=np.float64)
    n = cache.inputs.shape[0]
    if cache.outputs.shape != targets.shape:
        raise StaleCache(
            f"cache outputs {cache.outputs.shape} vs targets {targets.shape}"
        )
    if len(cache.hidden) != len(model.weights) - 1 or (
        cache.inputs.shape[1] != model.weights[0].shape[0]
    ):
        raise StaleCache("cache does not match model layout")
    if model.head == HEAD_CLASSIFIER:
        delta = (cache.outputs - targets) / n
    else:
        out = cache.outputs
        delta = 2.0 * (out - targets) * out * (1.0 - out) / targets.size
    d_weights: list[np.ndarray] = [np.empty(0)] * len(model.weights)
    d_biases: list[np.ndarray] = [np.empty(0)] * len(model.biases)
    for k in range(len(model.weights) - 1, -1, -1):
        below = cache.hidden[k - 1] if k > 0 else cache.inputs
        d_weights[k] = below.T @ delta
        d_biases[k] = delta.sum(axis=0)
        if k == 0:
            break
        da = delta @ model.weights[k].T
        if cache.masks is not None and cache.masks[k - 1] is not None:
            da = da * cache.masks[k - 1]
        delta = da * (cache.pre_acts[k - 1] > 0.0)
    return d_weights, d_biases


@dataclass(frozen=True)
class TrainConfig:
    """Training protocol knobs; defaults follow the production recipe."""

    epochs: int = 1000
    batch_size: int = 512
    dropout_rate: float = 0.15
    learning_rate: float = 0.05
    lr_schedule: str = "constant"  # "constant" or "step_decay"
    lr_decay_every: int = 200
    lr_decay_factor: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.learning_rate < 0.0:
            raise ValueError("learning_rate must be >= 0")
        if self.lr_schedule not in ("constant", "step_decay"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.lr_decay_every < 1 or not 0.0 < self.lr_decay_factor <= 1.0:
            raise ValueError("bad step-decay parameters")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant":
            return self.learning_rate
        return self.learning_rate * self.lr_decay_factor ** (
            epoch // self.lr_decay_every
        )


@dataclass
class TrainReport:
    """Per-epoch losses plus final quality of the best-validation snapshot."""

    head: str
    target_field: str | None
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1
    train_metric: float = float("nan")
    val_metric: float = float("nan")
    metric_name: str = ""
    wall_time_s: float = 0.0

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            fh.write("epoch,train_loss,val_loss\n")
            for i, (tr, va) in enumerate(zip(self.train_losses, self.val_losses)):
                fh.write(f"{i},{tr!r},{va!r}\n")


def _split_arrays(
    split: DatasetSplit, head: str, target_field: str | None
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    def build(samples: Sequence[WindowSample]):
        if head == HEAD_CLASSIFIER:
            use = list(samples)
        else:
            use = [s for s in samples if s.sd_included]
        if not use:
            raise ValueError("split contains no usable samples for this head")
        x = np.stack([s.features for s in use]).astype(np.float64)
        if head == HEAD_CLASSIFIER:
            labels = np.array([int(s.sd_included) for s in use])
            y = np.zeros((len(use), 2))
            y[np.arange(len(use)), labels] = 1.0
        else:
            if target_field == "start":
                y = np.array([[s.start_target] for s in use])
            elif target_field == "end":
                y = np.array([[s.end_target] for s in use])
            else:
                raise ValueError(
                    "regressor training needs target_field 'start' or 'end'"
                )
        return x, y

    x_train, y_train = build(split.train)
    x_val, y_val = build(split.val)
    return x_train, y_train, x_val, y_val


def _metric(head: str, outputs: np.ndarray, targets: np.ndarray) -> float:
    if head == HEAD_CLASSIFIER:
        return float(
            (outputs.argmax(axis=1) == targets.argmax(axis=1)).mean()
        )
    return float(((outputs - targets) ** 2).mean())


def train(
    model: MlpModel,
    split: DatasetSplit,
    cfg: TrainConfig,
    target_field: str | None = None,
) -> tuple[MlpModel, TrainReport]:
    """Minibatch-SGD training; returns the best-validation-loss snapshot.

    The passed model provides the initial parameters and is not mutated.
    Regressor heads fit ``target_field`` ("start" or "end") on the positive
    windows only.
    """
    t_begin = time.perf_counter()
    x_train, y_train, x_val, y_val = _split_arrays(split, model.head, target_field)
    work = model.clone()
    hidden_dims = work.layer_dims[1:-1]
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport(
        head=model.head,
        target_field=target_field,
        metric_name="accuracy" if model.head == HEAD_CLASSIFIER else "mse",
    )
    best_val = np.inf
    best = work.clone()
    n = x_train.shape[0]
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            masks = make_dropout_masks(rng, cfg.dropout_rate, len(idx), hidden_dims)
            out, cache = forward(work, xb, masks)
            batch_loss = loss(work.head, out, yb)
            if not np.isfinite(batch_loss):
                report.wall_time_s = time.perf_counter() - t_begin
                raise DivergedLoss(
                    f"loss became non-finite at epoch {epoch}", report
                )
            total += batch_loss * len(idx)
            d_w, d_b = backward(work, cache, yb)
            for k in range(len(work.weights)):
                work.weights[k] -= lr * d_w[k]
                work.biases[k] -= lr * d_b[k]
        report.train_losses.append(total / n)
        val_out, _ = forward(work, x_val)
        val_loss = loss(work.head, val_out, y_val)
        if not np.isfinite(val_loss):
            report.wall_time_s = time.perf_counter() - t_begin
            raise DivergedLoss(f"validation loss non-finite at epoch {epoch}", report)
        report.val_losses.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best = work.clone()
            report.best_epoch = epoch
    train_out, _ = forward(best, x_train)
    val_out, _ = forward(best, x_val)
    report.train_metric = _metric(best.head, train_out, y_train)
    report.val_metric = _metric(best.head, val_out, y_val)
    report.wall_time_s = time.perf_counter() - t_begin
    return best, report


def predict_detection(model: MlpModel, window: np.ndarray) -> np.ndarray:
    """Probability pair ``(p_no_slowdown, p_slowdown)`` for one window."""
    return model.predict_proba(np.asarray(window).reshape(1, -1))[0]


def predict_time(model: MlpModel, window: np.ndarray) -> float:
    """Predicted event boundary as a fraction of the window, in (0, 1)."""
    return float(model.predict_fraction(np.asarray(window).reshape(1, -1))[0])


# ---------------------------------------------------------------------------
# Serialization: magic, version, head tag, dims, float64 params, CRC32
# ---------------------------------------------------------------------------


def save_model(model: MlpModel, path: str | Path) -> None:
    dims = model.layer_dims
    parts = [
        _MODEL_MAGIC,
        struct.pack("<I", _MODEL_VERSION),
        struct.pack("<B", _HEAD_TAGS[model.head]),
        struct.pack("<I", len(dims)),
        struct.pack(f"<{len(dims)}I", *dims),
    ]
    for w, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    payload = b"".join(parts)
    Path(path).write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))


def load_model(path: str | Path) -> MlpModel:
    raw = Path(path).read_bytes()
    if len(raw) < 4 + 4 + 1 + 4 + 4:
        raise CorruptModel(f"{path}: file too short")
    payload, crc_bytes = raw[:-4], raw[-4:]
    if struct.unpack("<I", crc_bytes)[0] != zlib.crc32(payload):
        raise CorruptModel(f"{path}: checksum mismatch")
    if payload[:4] != _MODEL_MAGIC:
        raise CorruptModel(f"{path}: bad magic {payload[:4]!r}")
    pos = 4
    (version,) = struct.unpack_from("<I", payload, pos)
    pos += 4
    if version != _MODEL_VERSION:
        raise CorruptModel(f"{path}: unsupported model version {version}")
    (head_tag,) = struct.unpack_from("<B", payload, pos)
    pos += 1
    if head_tag not in _TAG_HEADS:
        raise CorruptModel(f"{path}: unknown head tag {head_tag}")
    (n_dims,) = struct.unpack_from("<I", payload, pos)
    pos += 4
    if n_dims < 2:
        raise CorruptModel(f"{path}: implausible layer count {n_dims}")
    dims = struct.unpack_from(f"<{n_dims}I", payload, pos)
    pos += 4 * n_dims
    expected = pos + sum(
        (dims[k] * dims[k + 1] + dims[k + 1]) * 8 for k in range(n_dims - 1)
    )
    if len(payload) != expected:
        raise CorruptModel(f"{path}: parameter block size mismatch")
    weights, biases = [], []
    for k in range(n_dims - 1):
        fan_in, fan_out = dims[k], dims[k + 1]
        w = np.frombuffer(payload, dtype="<f8", count=fan_in * fan_out, offset=pos)
        pos += fan_in * fan_out * 8
        b = np.frombuffer(payload, dtype="<f8", count=fan_out, offset=pos)
        pos += fan_out * 8
        weights.append(w.reshape(fan_in, fan_out).astype(np.float64))
        biases.append(b.astype(np.float64))
    return MlpModel(weights, biases, _TAG_HEADS[head_tag])
