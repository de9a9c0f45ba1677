"""Concordance fusion of several teachers' class probabilities.

For one point, the teacher holding the single highest class probability
fixes the pseudo-label ``k*`` and its score ``y*``.  Every other teacher
whose own argmax equals ``k*`` adds ``lam`` to the confidence, which is then
clipped at 1.  Points whose confidence falls below ``theta`` are kept but
flagged as Don't Care.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from concordance.errors import (
    ConfigError,
    DuplicateSequence,
    EmptyTeacherSet,
    LengthMismatch,
    MalformedFile,
    PointCountMismatch,
)

PROB_SUM_TOL = 1e-6
HUMAN = "human"
PSEUDO = "pseudo"


@dataclass(frozen=True)
class FusionConfig:
    lam: float = 0.1
    theta: float = 0.7

    def __post_init__(self):
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError(f"theta must lie in [0, 1], got {self.theta}")


@dataclass(frozen=True, eq=False)
class TeacherOutput:
    teacher_id: str
    temporal_range: int
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2:
            raise LengthMismatch(f"teacher {self.teacher_id}: probs must be (K, C), got {p.shape}")
        if len(p) and (np.any(p < 0) or np.max(np.abs(p.sum(axis=1) - 1.0)) > PROB_SUM_TOL):
            raise ConfigError(f"teacher {self.teacher_id}: rows must be probability vectors")
        object.__setattr__(self, "probs", p)


@dataclass(frozen=True)
class PseudoLabel:
    label: int
    confidence: float
    selected: bool = True


@dataclass(frozen=True, eq=False)
class PseudoLabels:
    """Per-point fused labels of one scan."""

    labels: np.ndarray
    confidences: np.ndarray
    selected: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> PseudoLabel:
        return PseudoLabel(int(self.labels[i]), float(self.confidences[i]), bool(self.selected[i]))


def fuse_point(outputs, cfg: FusionConfig = FusionConfig()) -> PseudoLabel:
    """Fuse one point's per-teacher probability vectors, rows ordered by teacher id."""
    rows = [np.asarray(o, dtype=np.float64).reshape(-1) for o in outputs]
    if not rows:
        raise EmptyTeacherSet("at least one teacher is required")
    if len({len(r) for r in rows}) != 1:
        raise LengthMismatch("all teachers must predict the same number of classes")
    fused = fuse_scan(np.stack(rows)[:, None, :], cfg)
    return fused[0]


def fuse_scan(outputs, cfg: FusionConfig = FusionConfig()) -> PseudoLabels:
    """Pointwise fusion.

    ``outputs`` is a ``(T, K, C)`` array or a sequence of ``(K, C)`` arrays /
    :class:`TeacherOutput` in teacher-id order.
    """
    if isinstance(outputs, np.ndarray):
        probs = np.asarray(outputs, dtype=np.float64)
    else:
        arrays = [o.probs if isinstance(o, TeacherOutput) else np.asarray(o, dtype=np.float64) for o in outputs]
        if not arrays:
            raise EmptyTeacherSet("at least one teacher is required")
        if len({a.shape[0] for a in arrays}) != 1:
            raise PointCountMismatch(f"teachers disagree on point count: {[a.shape[0] for a in arrays]}")
        if len({a.shape[1] for a in arrays}) != 1:
            raise LengthMismatch("teachers disagree on the number of classes")
        probs = np.stack(arrays)
    if probs.ndim != 3 or probs.shape[0] == 0:
        raise EmptyTeacherSet("expected a non-empty (T, K, C) stack")
    n_teachers, n_points, _ = probs.shape
    if n_points == 0:
        empty = np.zeros(0)
        return PseudoLabels(empty.astype(np.int64), empty, empty.astype(bool))

    cols = np.arange(n_points)
    teacher_max = probs.max(axis=2)
    strongest = np.argmax(teacher_max, axis=0)
    teacher_argmax = np.argmax(probs, axis=2)
    k_star = teacher_argmax[strongest, cols]
    y_star = probs[strongest, cols, k_star]
    agree = (teacher_argmax == k_star[None, :]).sum(axis=0) - 1
    c_hat = y_star + cfg.lam * agree
    c = np.minimum(1.0, c_hat)
    return PseudoLabels(k_star.astype(np.int64), c, c >= cfg.theta)


def select(labels: PseudoLabels, theta: float) -> PseudoLabels:
    """Re-apply the confidence threshold; deselected points become Don't Care."""
    if not 0.0 <= theta <= 1.0:
        raise ConfigError(f"theta must lie in [0, 1], got {theta}")
    return PseudoLabels(labels.labels, labels.confidences, labels.confidences >= theta)


# --- combined training set ---------------------------------------------


@dataclass(frozen=True, eq=False)
class Sample:
    """Training targets for the reference scan of one sequence.

    Points with ``mask == False`` are Don't Care and excluded from the loss.
    """

    sequence_id: str
    labels: np.ndarray
    confidences: np.ndarray
    mask: np.ndarray
    provenance: str

    @property
    def num_selected(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True, eq=False)
class PseudoDataset:
    samples: tuple

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def confidences(self) -> np.ndarray:
        """Confidences of every selected point, in sample order."""
        parts = [s.confidences[s.mask] for s in self.samples]
        return np.concatenate(parts) if parts else np.zeros(0)


def assemble_dataset(
    labeled: Mapping[str, np.ndarray], pseudo: Mapping[str, PseudoLabels]
) -> PseudoDataset:
    """Union of human-labelled scans (confidence 1) and selected pseudo-labels."""
    dup = sorted(set(labeled) & set(pseudo))
    if dup:
        raise DuplicateSequence(f"sequences in both labelled and pseudo sets: {dup}")
    samples = []
    for sid, y in labeled.items():
        y = np.asarray(y, dtype=np.int64)
        samples.append(Sample(sid, y, np.ones(len(y)), np.ones(len(y), dtype=bool), HUMAN))
    for sid, pl in pseudo.items():
        samples.append(Sample(sid, pl.labels, pl.confidences, np.asarray(pl.selected, dtype=bool), PSEUDO))
    return PseudoDataset(tuple(samples))


# --- JSON-lines interchange --------------------------------------------


def prediction_record(sequence_id: str, frame_index: int, out: TeacherOutput) -> dict:
    return {
        "sequence_id": sequence_id,
        "frame_index": int(frame_index),
        "teacher_id": out.teacher_id,
        "temporal_range": int(out.temporal_range),
        "num_classes": int(out.probs.shape[1]),
        "probs": out.probs.tolist(),
    }


def fused_record(sequence_id: str, frame_index: int, pl: PseudoLabels) -> dict:
    return {
        "sequence_id": sequence_id,
        "frame_index": int(frame_index),
        "teacher_id": "fused",
        "labels": pl.labels.tolist(),
        "confidences": pl.confidences.tolist(),
        "selected": pl.selected.tolist(),
    }


def record_to_teacher_output(rec: dict) -> TeacherOutput:
    probs = np.asarray(rec["probs"], dtype=np.float64)
    if probs.size == 0:
        probs = probs.reshape(0, rec.get("num_classes", 0))
    return TeacherOutput(rec["teacher_id"], rec.get("temporal_range", 0), probs)


def record_to_pseudolabels(rec: dict) -> PseudoLabels:
    return PseudoLabels(
        np.asarray(rec["labels"], dtype=np.int64),
        np.asarray(rec["confidences"], dtype=np.float64),
        np.asarray(rec["selected"], dtype=bool),
    )


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")


def read_jsonl(path) -> list[dict]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedFile(f"{path}: not UTF-8 text ({exc.reason})") from None
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise MalformedFile(f"{path}:{lineno}: {exc}") from None
    return out
