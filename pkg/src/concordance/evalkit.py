"""Segmentation and detection metrics, and run-comparison reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence as Seq

import numpy as np

from concordance.detfuse import Box3D, iou3d
from concordance.errors import ConfigError, EmptyMatrix, LengthMismatch, SchemaMismatch

REPORT_SCHEMA = "concordance.metrics/1"
COMPARE_SCHEMA = "concordance.compare/1"
ALL_POINT = "all"
KITTI_40 = "40"


@dataclass(eq=False)
class ConfusionMatrix:
    """Rows are ground truth, columns predictions."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ConfigError("confusion matrix must be square")
        if np.any(self.counts < 0):
            raise ConfigError("confusion counts must be non-negative")

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @classmethod
    def from_labels(
        cls,
        gt: np.ndarray,
        pred: np.ndarray,
        num_classes: int,
        ignore_index: Optional[int] = None,
        mask: Optional[np.ndarray] = None,
    ) -> "ConfusionMatrix":
        """Accumulate point labels; ``ignore_index`` and ``mask == False`` points are skipped."""
        gt = np.asarray(gt, dtype=np.int64).reshape(-1)
        pred = np.asarray(pred, dtype=np.int64).reshape(-1)
        if len(gt) != len(pred):
            raise LengthMismatch("gt and predictions differ in length")
        keep = np.ones(len(gt), dtype=bool)
        if ignore_index is not None:
            keep &= gt != ignore_index
        if mask is not None:
            keep &= np.asarray(mask, dtype=bool)
        gt, pred = gt[keep], pred[keep]
        if np.any((gt < 0) | (gt >= num_classes) | (pred < 0) | (pred >= num_classes)):
            raise ConfigError("label outside [0, num_classes)")
        flat = np.bincount(gt * num_classes + pred, minlength=num_classes * num_classes)
        return cls(flat.reshape(num_classes, num_classes))

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True, eq=False)
class IoUResult:
    per_class: np.ndarray  # NaN where undefined
    mean: float

    def to_dict(self, class_names: Optional[Seq[str]] = None) -> dict:
        names = class_names or [str(k) for k in range(len(self.per_class))]
        return {
            "per_class": {n: (None if math.isnan(v) else float(v)) for n, v in zip(names, self.per_class)},
            "mean": None if math.isnan(self.mean) else float(self.mean),
        }


def miou(cm: ConfusionMatrix) -> IoUResult:
    if cm.num_classes < 2:
        raise ConfigError("mIoU needs at least two classes")
    if cm.total == 0:
        raise EmptyMatrix("confusion matrix has no counts")
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    denom = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom > 0, tp / denom, np.nan)
    valid = ~np.isnan(iou)
    return IoUResult(iou, float(iou[valid].mean()) if valid.any() else math.nan)


# --- average precision --------------------------------------------------


@dataclass(frozen=True, eq=False)
class APResult:
    tp: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    ap: float
    num_gt: int


def ap_from_ranked(tp_flags: Seq[bool], num_gt: int, interpolation: str = ALL_POINT) -> APResult:
    """AP of a score-ranked list of TP/FP flags against ``num_gt`` ground-truth objects."""
    tp = np.asarray(tp_flags, dtype=bool)
    if num_gt == 0:
        ap = math.nan if len(tp) == 0 else 0.0
        return APResult(tp, np.zeros(len(tp)), np.zeros(len(tp)), ap, 0)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / num_gt
    precision = ctp / np.maximum(ctp + cfp, 1)
    if len(tp) == 0:
        return APResult(tp, precision, recall, 0.0, num_gt)
    if interpolation == ALL_POINT:
        r = np.concatenate([[0.0], recall, [1.0]])
        p = np.concatenate([[0.0], precision, [0.0]])
        env = np.maximum.accumulate(p[::-1])[::-1]
        steps = np.nonzero(r[1:] != r[:-1])[0]
        ap = float(np.sum((r[steps + 1] - r[steps]) * env[steps + 1]))
    elif interpolation == KITTI_40:
        ap = 0.0
        for thr in np.linspace(1.0 / 40, 1.0, 40):
            above = precision[recall >= thr]
            ap += (above.max() if len(above) else 0.0) / 40
        ap = float(ap)
    else:
        raise ConfigError(f"unknown interpolation {interpolation!r}")
    return APResult(tp, precision, recall, ap, num_gt)


def match_detections(dets: Seq[Box3D], gts: Seq[Box3D], match_iou: float, scores: Optional[Seq[float]] = None) -> tuple[np.ndarray, np.ndarray]:
    """Greedy matching in descending score; returns (order, tp flags in that order)."""
    s = np.array([d.score for d in dets] if scores is None else scores, dtype=np.float64)
    order = np.argsort(-s, kind="stable")
    used = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        best, best_j = match_iou, -1
        for j, g in enumerate(gts):
            if used[j]:
                continue
            v = iou3d(dets[i], g)
            if v >= best:
                best, best_j = v, j
        if best_j >= 0:
            used[best_j] = True
            tp[rank] = True
    return order, tp


def average_precision(
    dets: Seq[Box3D],
    gts: Seq[Box3D],
    match_iou: float = 0.7,
    interpolation: str = ALL_POINT,
    scores: Optional[Seq[float]] = None,
) -> APResult:
    _, tp = match_detections(dets, gts, match_iou, scores)
    return ap_from_ranked(tp, len(gts), interpolation)


def average_precision_frames(
    frames: Seq[tuple[Seq[Box3D], Seq[Box3D], Optional[Seq[float]]]],
    match_iou: float = 0.7,
    interpolation: str = ALL_POINT,
) -> APResult:
    """AP pooled over frames; matching happens per frame, ranking globally."""
    all_scores, all_tp, num_gt = [], [], 0
    for dets, gts, scores in frames:
        order, tp = match_detections(dets, gts, match_iou, scores)
        s = np.array([d.score for d in dets] if scores is None else scores, dtype=np.float64)
        all_scores.append(s[order])
        all_tp.append(tp)
        num_gt += len(gts)
    s = np.concatenate(all_scores) if all_scores else np.zeros(0)
    tp = np.concatenate(all_tp) if all_tp else np.zeros(0, dtype=bool)
    rank = np.argsort(-s, kind="stable")
    return ap_from_ranked(tp[rank], num_gt, interpolation)


# --- reports --------------------------------------------------------------


def metrics_report(result: IoUResult, class_names: Optional[Seq[str]] = None, **extra) -> dict:
    rep = {"schema": REPORT_SCHEMA, **result.to_dict(class_names)}
    rep.update(extra)
    return rep


def dumps_report(report: Mapping) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def render_report(report: Mapping) -> str:
    lines = [f"{'class':<16}{'IoU':>10}"]
    for name, v in report["per_class"].items():
        lines.append(f"{name:<16}{'n/a' if v is None else f'{100 * v:.2f}':>10}")
    mean = report["mean"]
    lines.append(f"{'mean':<16}{'n/a' if mean is None else f'{100 * mean:.2f}':>10}")
    return "\n".join(lines) + "\n"


def compare_runs(runs: Seq[Mapping], names: Optional[Seq[str]] = None) -> dict:
    """Tabulate flat metric dicts; deltas are relative to the first run.

    Each run is ``{"metrics": {name: value}}`` or a bare ``{name: value}``.
    """
    if len(runs) < 2:
        raise ConfigError("need at least two runs to compare")
    flat = [dict(r.get("metrics", r)) for r in runs]
    keys = list(flat[0])
    for i, f in enumerate(flat[1:], 1):
        if list(f) != keys:
            raise SchemaMismatch(f"run {i} has metrics {sorted(f)}, expected {sorted(keys)}")
    names = list(names) if names else [r.get("name", f"run{i}") for i, r in enumerate(runs)]
    rows = []
    for name, f in zip(names, flat):
        rows.append(
            {
                "name": name,
                "values": {k: f[k] for k in keys},
                "delta": {k: _delta(f[k], flat[0][k]) for k in keys},
            }
        )
    return {"schema": COMPARE_SCHEMA, "metrics": keys, "rows": rows}


def _delta(v, base):
    if v is None or base is None:
        return None
    return round(float(v) - float(base), 12)


def render_comparison(table: Mapping) -> str:
    keys = table["metrics"]
    width = max([len(r["name"]) for r in table["rows"]] + [4]) + 2
    cw = {k: max(len(k), 8) + 2 for k in keys}
    head = f"{'run':<{width}}" + "".join(f"{k:>{cw[k]}}{'Δ':>10}" for k in keys)
    lines = [head]
    for r in table["rows"]:
        cells = []
        for k in keys:
            v, d = r["values"][k], r["delta"][k]
            cells.append(f"{'n/a' if v is None else f'{v:.4g}':>{cw[k]}}{'n/a' if d is None else f'{d:+.4g}':>10}")
        lines.append(f"{r['name']:<{width}}" + "".join(cells))
    return "\n".join(lines) + "\n"
