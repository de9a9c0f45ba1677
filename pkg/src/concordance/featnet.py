"""Time-aware point featurisation and a compact point classifier.

Each reference point is described by max-pooling ``phi(x_t - x0, t)`` over
its spatio-temporal neighbourhood, where ``phi`` is a small ReLU MLP.  A
linear head maps the pooled feature to class logits.  Training minimises
the confidence-weighted cross-entropy ``(1/M) sum c * CE`` with plain SGD.

Everything runs on float64 numpy arrays; gradients are computed by hand.
"""

from __future__ import annotations

import dataclasses
import json
import math
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence as Seq

import numpy as np

from concordance.errors import (
    ConfidenceOutOfRange,
    ConfigError,
    EmptyNeighborhood,
    LengthMismatch,
    MalformedFile,
    NonFiniteLoss,
    RangeMismatch,
)
from concordance.seqcloud import Sequence, align_sequence, window
from concordance.stindex import Neighborhood, NeighborhoodBatch, RadiusFn, SpatioTemporalIndex, build_index

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "concordance.model"
CHECKPOINT_VERSION = 1


@dataclass(eq=False)
class PhiParams:
    """Weights of the per-neighbour MLP; ``weights[i]`` has shape ``(fan_in, fan_out)``.

    ReLU follows every layer except the last.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64).reshape(-1) for b in self.biases]
        if not self.weights or len(self.weights) != len(self.biases):
            raise ConfigError("phi needs one bias per weight matrix")
        if self.weights[0].shape[0] != 4:
            raise ConfigError("phi input width must be 4 (dx, dy, dz, t)")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ConfigError(f"phi layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ConfigError(f"phi layer {i} input does not chain with layer {i - 1}")

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: Seq[int] = (32, 32), out: int = 32) -> "PhiParams":
        widths = [4, *hidden, out]
        ws, bs = [], []
        for fan_in, fan_out in zip(widths, widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            ws.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            bs.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(ws, bs)


@dataclass(eq=False)
class ClassifierParams:
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ConfigError("head weight must be (F, C) with a length-C bias")
        if self.weight.shape[1] < 2:
            raise ConfigError("classifier needs at least two classes")

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, width: int, num_classes: int) -> "ClassifierParams":
        bound = 1.0 / np.sqrt(width)
        return cls(
            rng.uniform(-bound, bound, size=(width, num_classes)),
            rng.uniform(-bound, bound, size=num_classes),
        )


@dataclass(eq=False)
class ModelSpec:
    """A point classifier that looks at time offsets ``[-past, future]``.

    Teachers use ``future > 0``; students are :class:`StudentSpec`.
    """

    past: int
    future: int
    phi: PhiParams
    head: ClassifierParams
    radius: RadiusFn = field(default_factory=RadiusFn)
    time_scale: float = 1.0
    max_neighbors: Optional[int] = None

    def __post_init__(self):
        if self.past < 0 or self.future < 0:
            raise ConfigError("temporal ranges must be non-negative")
        if self.phi.out_width != self.head.weight.shape[0]:
            raise ConfigError("phi output width does not match head input width")

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.phi.weights, self.phi.biases):
            out += [w, b]
        return out + [self.head.weight, self.head.bias]

    def with_parameters(self, params: Seq[np.ndarray]) -> "ModelSpec":
        n = len(self.phi.weights)
        phi = PhiParams([params[2 * i] for i in range(n)], [params[2 * i + 1] for i in range(n)])
        head = ClassifierParams(params[2 * n], params[2 * n + 1])
        return dataclasses.replace(self, phi=phi, head=head)

    def copy(self) -> "ModelSpec":
        return self.with_parameters([p.copy() for p in self.parameters()])


@dataclass(eq=False)
class StudentSpec(ModelSpec):
    """Online model: sees only past and current scans."""

    def __post_init__(self):
        super().__post_init__()
        if self.future != 0:
            raise ConfigError("a student must not look at future scans")


def init_model(
    past: int,
    future: int,
    num_classes: int,
    seed: int,
    hidden: Seq[int] = (32, 32),
    width: int = 32,
    radius: Optional[RadiusFn] = None,
    time_scale: float = 1.0,
    max_neighbors: Optional[int] = None,
) -> ModelSpec:
    rng = np.random.default_rng(seed)
    phi = PhiParams.init(rng, hidden, width)
    head = ClassifierParams.init(rng, width, num_classes)
    cls = StudentSpec if future == 0 else ModelSpec
    return cls(past, future, phi, head, radius or RadiusFn(), time_scale, max_neighbors)


@dataclass(eq=False)
class PointBatch:
    """Flattened neighbourhood rows for a set of reference points.

    ``features[ptr[q]:ptr[q+1]]`` are the ``(dx, dy, dz, t)`` rows of point ``q``.
    """

    features: np.ndarray
    ptr: np.ndarray
    labels: np.ndarray
    confidences: np.ndarray

    def __post_init__(self):
        n = len(self.ptr) - 1
        if len(self.labels) != n or len(self.confidences) != n:
            raise LengthMismatch("labels/confidences must have one entry per reference point")

    def __len__(self) -> int:
        return len(self.ptr) - 1

    @classmethod
    def from_neighborhoods(
        cls, nb: NeighborhoodBatch, labels, confidences=None, time_scale: float = 1.0
    ) -> "PointBatch":
        labels = np.asarray(labels, dtype=np.int64)
        conf = np.ones(len(labels)) if confidences is None else np.asarray(confidences, dtype=np.float64)
        return cls(nb.features(time_scale), nb.ptr.copy(), labels, conf)

    @classmethod
    def concat(cls, batches: Seq["PointBatch"]) -> "PointBatch":
        if not batches:
            return cls(np.zeros((0, 4)), np.zeros(1, dtype=np.int64), np.zeros(0, np.int64), np.zeros(0))
        ptrs, shift = [np.zeros(1, dtype=np.int64)], 0
        for b in batches:
            ptrs.append(b.ptr[1:] + shift)
            shift += b.ptr[-1]
        return cls(
            np.vstack([b.features for b in batches]),
            np.concatenate(ptrs),
            np.concatenate([b.labels for b in batches]),
            np.concatenate([b.confidences for b in batches]),
        )

    def subset(self, ids: np.ndarray) -> "PointBatch":
        ids = np.asarray(ids, dtype=np.int64)
        starts = self.ptr[ids]
        counts = self.ptr[ids + 1] - starts
        first = np.repeat(np.cumsum(counts) - counts, counts)
        rows = np.repeat(starts, counts) + np.arange(int(counts.sum())) - first
        ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return PointBatch(self.features[rows], ptr, self.labels[ids], self.confidences[ids])


# --- forward ------------------------------------------------------------


def _phi_forward(phi: PhiParams, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    if len(x) == 1:
        # a one-row product takes a different BLAS kernel whose rounding can
        # differ by an ulp; padding keeps per-row results shape independent
        out, acts = _phi_forward(phi, np.vstack([x, x]))
        return out[:1], [a[:1] for a in acts]
    acts = [x]
    a = x
    last = len(phi.weights) - 1
    for i, (w, b) in enumerate(zip(phi.weights, phi.biases)):
        z = a @ w + b
        a = np.maximum(z, 0.0) if i < last else z
        acts.append(a)
    return a, acts


def _max_pool(rows: np.ndarray, ptr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Segment max and the winning row per (segment, channel); ties go to the lowest row."""
    sizes = np.diff(ptr)
    if np.any(sizes == 0):
        raise EmptyNeighborhood("every reference point needs at least one neighbour")
    starts = ptr[:-1]
    pooled = np.maximum.reduceat(rows, starts, axis=0)
    seg = np.repeat(np.arange(len(sizes)), sizes)
    row_ids = np.arange(len(rows))[:, None]
    cand = np.where(rows == pooled[seg], row_ids, len(rows))
    arg = np.minimum.reduceat(cand, starts, axis=0)
    return pooled, arg


def featurize(phi: PhiParams, nbhd: Neighborhood, time_scale: float = 1.0) -> np.ndarray:
    """Pooled feature ``h(x0)`` of one neighbourhood."""
    if len(nbhd) == 0:
        raise EmptyNeighborhood("empty neighbourhood")
    out, _ = _phi_forward(phi, nbhd.features(time_scale))
    return out.max(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def forward_logits(model: ModelSpec, features: np.ndarray, ptr: np.ndarray) -> np.ndarray:
    rows, _ = _phi_forward(model.phi, features)
    pooled, _ = _max_pool(rows, ptr)
    return pooled @ model.head.weight + model.head.bias


def model_index(model: ModelSpec, seq: Sequence) -> SpatioTemporalIndex:
    """Align ``seq``, crop it to the model's window and index it."""
    cropped = window(seq, model.past, model.future)
    if not cropped.aligned:
        cropped = align_sequence(cropped)
    return build_index(cropped, model.radius, model.max_neighbors)


def reference_neighborhoods(model: ModelSpec, seq: Sequence, index: Optional[SpatioTemporalIndex] = None) -> NeighborhoodBatch:
    if index is None:
        index = model_index(model, seq)
    missing = [t for t in range(-model.past, model.future + 1) if t not in index.offsets]
    if missing:
        raise RangeMismatch(f"index lacks time offsets {missing} required by the model")
    return index.query(index.scan_points(0)[:, :3], model.past, model.future)


def predict(model: ModelSpec, seq: Sequence, index: Optional[SpatioTemporalIndex] = None) -> np.ndarray:
    """Per-point class probabilities ``(K, C)`` for the reference scan."""
    nb = reference_neighborhoods(model, seq, index)
    if nb.num_queries == 0:
        return np.zeros((0, model.num_classes))
    return softmax(forward_logits(model, nb.features(model.time_scale), nb.ptr))


def predict_batch(model: ModelSpec, batch: PointBatch) -> np.ndarray:
    if len(batch) == 0:
        return np.zeros((0, model.num_classes))
    return softmax(forward_logits(model, batch.features, batch.ptr))


# --- loss and gradients -------------------------------------------------


def _check_confidences(c: np.ndarray) -> None:
    if np.any(~(c > 0.0) | (c > 1.0)):
        raise ConfidenceOutOfRange("confidences must lie in (0, 1]")


def _as_class_ids(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    return labels.argmax(axis=1) if labels.ndim == 2 else labels.astype(np.int64)


def weighted_loss(preds: np.ndarray, labels: np.ndarray, confidences: np.ndarray, M: Optional[int] = None) -> float:
    """``(1/M) * sum_i c_i * CE(preds_i, labels_i)``.

    ``preds`` are probabilities, ``labels`` one-hot rows or class ids.
    ``M`` defaults to the number of samples.
    """
    preds = np.asarray(preds, dtype=np.float64)
    y = _as_class_ids(labels)
    c = np.asarray(confidences, dtype=np.float64)
    if not (len(preds) == len(y) == len(c)):
        raise LengthMismatch("preds, labels and confidences must have equal length")
    _check_confidences(c)
    m = len(y) if M is None else M
    if m == 0:
        return 0.0
    ce = -np.log(preds[np.arange(len(y)), y])
    return float(np.sum(c * ce) / m)


def loss_and_gradients(model: ModelSpec, batch: PointBatch, M: Optional[int] = None) -> tuple[float, list[np.ndarray]]:
    """Weighted cross-entropy of ``batch`` and its gradient w.r.t. ``model.parameters()``."""
    if len(batch) == 0:
        raise ConfigError("batch must be non-empty")
    _check_confidences(batch.confidences)
    m = len(batch) if M is None else M
    rows, acts = _phi_forward(model.phi, batch.features)
    if not np.all(np.isfinite(rows)):
        raise NonFiniteLoss("non-finite neighbour features")
    pooled, arg = _max_pool(rows, batch.ptr)
    logits = pooled @ model.head.weight + model.head.bias
    logp = _log_softmax(logits)
    idx = np.arange(len(batch))
    c = batch.confidences
    loss = float(np.sum(c * -logp[idx, batch.labels]) / m)

    dlogits = np.exp(logp)
    dlogits[idx, batch.labels] -= 1.0
    dlogits *= (c / m)[:, None]
    g_head_w = pooled.T @ dlogits
    g_head_b = dlogits.sum(axis=0)
    dpooled = dlogits @ model.head.weight.T

    drows = np.zeros_like(rows)
    drows[arg, np.arange(rows.shape[1])[None, :]] = dpooled

    grads: list[np.ndarray] = []
    delta = drows
    for i in range(len(model.phi.weights) - 1, -1, -1):
        if i < len(model.phi.weights) - 1:
            delta = delta * (acts[i + 1] > 0.0)
        grads.append(delta.sum(axis=0))
        grads.append(acts[i].T @ delta)
        delta = delta @ model.phi.weights[i].T
    grads.reverse()
    return loss, grads + [g_head_w, g_head_b]


def gradients(model: ModelSpec, batch: PointBatch, M: Optional[int] = None) -> list[np.ndarray]:
    return loss_and_gradients(model, batch, M)[1]


def batch_loss(model: ModelSpec, batch: PointBatch, M: Optional[int] = None) -> float:
    if len(batch) == 0:
        return 0.0
    logp = _log_softmax(forward_logits(model, batch.features, batch.ptr))
    m = len(batch) if M is None else M
    return float(np.sum(batch.confidences * -logp[np.arange(len(batch)), batch.labels]) / m)


# --- training -----------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 30
    batch_size: int = 256
    seed: int = 0
    momentum: float = 0.9
    schedule: str = "constant"  # or "cosine": decay towards zero over the run

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning rate must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown learning-rate schedule {self.schedule!r}")

    def rate(self, epoch: int) -> float:
        if self.schedule == "cosine":
            return 0.5 * self.learning_rate * (1.0 + math.cos(math.pi * epoch / self.epochs))
        return self.learning_rate


def train(model: ModelSpec, data: PointBatch, cfg: TrainConfig) -> tuple[ModelSpec, list[float]]:
    """Minibatch SGD on the confidence-weighted loss.

    Returns the trained copy and, per epoch, the sample-weighted mean of the
    minibatch losses seen during that epoch.
    """
    if len(data) == 0:
        raise ConfigError("training set is empty")
    model = model.copy()
    params = model.parameters()
    velocity = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng(cfg.seed)
    trace = []
    n = len(data)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        lr = cfg.rate(epoch)
        total = 0.0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            batch = data.subset(order[start : start + cfg.batch_size])
            loss, grads = loss_and_gradients(model, batch)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise NonFiniteLoss(f"non-finite loss {loss} at epoch {epoch}, step {step}")
            total += loss * len(batch)
            for p, v, g in zip(params, velocity, grads):
                v *= cfg.momentum
                v -= lr * g
                p += v
        epoch_loss = total / n
        trace.append(epoch_loss)
        log.debug("epoch %d loss %.6f", epoch, epoch_loss)
    return model, trace


# --- checkpoints --------------------------------------------------------


def model_to_dict(model: ModelSpec) -> dict:
    def arr(a: np.ndarray) -> dict:
        return {"shape": list(a.shape), "data": [float(v) for v in a.reshape(-1)]}

    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "past": model.past,
        "future": model.future,
        "radius": {"r0": model.radius.r0, "slope": model.radius.slope},
        "time_scale": model.time_scale,
        "max_neighbors": model.max_neighbors,
        "phi": [{"weight": arr(w), "bias": arr(b)} for w, b in zip(model.phi.weights, model.phi.biases)],
        "head": {"weight": arr(model.head.weight), "bias": arr(model.head.bias)},
    }


def model_from_dict(d: dict) -> ModelSpec:
    if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint {d.get('format')!r} v{d.get('version')!r}")

    def arr(e: dict) -> np.ndarray:
        return np.asarray(e["data"], dtype=np.float64).reshape(e["shape"])

    phi = PhiParams([arr(l["weight"]) for l in d["phi"]], [arr(l["bias"]) for l in d["phi"]])
    head = ClassifierParams(arr(d["head"]["weight"]), arr(d["head"]["bias"]))
    cls = StudentSpec if d["future"] == 0 else ModelSpec
    return cls(
        d["past"], d["future"], phi, head, RadiusFn(**d["radius"]), d["time_scale"], d["max_neighbors"]
    )


def save_model(model: ModelSpec, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), sort_keys=True))


def load_model(path) -> ModelSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedFile(f"{path}: {exc}") from None
    try:
        return model_from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise MalformedFile(f"{path}: bad checkpoint ({exc})") from None
