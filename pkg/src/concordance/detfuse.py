"""Concordance for 3D boxes: oriented IoU, greedy clustering and cluster fusion."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence as Seq

import numpy as np

from concordance.concord import FusionConfig, PseudoLabel, fuse_point
from concordance.errors import ConfigError, DegenerateBox

SEED = "seed"
MUTUAL = "mutual"


def normalize_yaw(yaw: float) -> float:
    """Wrap into ``[-pi, pi)``."""
    y = math.fmod(float(yaw) + math.pi, 2.0 * math.pi)
    if y < 0:
        y += 2.0 * math.pi
    return y - math.pi


@dataclass(frozen=True, eq=False)
class Box3D:
    """Oriented box: centre, (length, width, height), yaw about +z, class probabilities."""

    center: np.ndarray
    size: np.ndarray
    yaw: float = 0.0
    probs: Optional[np.ndarray] = None
    teacher_id: int = 0
    box_index: int = 0

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        s = np.asarray(self.size, dtype=np.float64).reshape(3)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))
        if self.probs is not None:
            p = np.asarray(self.probs, dtype=np.float64).reshape(-1)
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
                raise ConfigError("box class probabilities must sum to 1")
            object.__setattr__(self, "probs", p)

    @classmethod
    def from_score(cls, center, size, yaw, label: int, score: float, num_classes: int, **kw) -> "Box3D":
        """Hard class + score, with the remaining mass spread over the other classes."""
        if num_classes < 2:
            raise ConfigError("need at least two classes")
        rest = (1.0 - score) / (num_classes - 1)
        probs = np.full(num_classes, rest)
        probs[label] = score
        return cls(center, size, yaw, probs, **kw)

    @property
    def score(self) -> float:
        return 1.0 if self.probs is None else float(self.probs.max())

    @property
    def label(self) -> int:
        return 0 if self.probs is None else int(np.argmax(self.probs))

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    def bev_corners(self) -> np.ndarray:
        """Footprint corners, counter-clockwise, shape ``(4, 2)``."""
        l, w = self.size[0] / 2.0, self.size[1] / 2.0
        local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]

    def z_range(self) -> tuple[float, float]:
        h = self.size[2] / 2.0
        return self.center[2] - h, self.center[2] + h


# --- geometry ------------------------------------------------------------


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _cross(o: np.ndarray, a: np.ndarray, p: np.ndarray) -> float:
    return (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0])


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the CCW convex polygon ``clip``."""
    out = [np.asarray(p, dtype=np.float64) for p in subject]
    n = len(clip)
    for i in range(n):
        a, b = clip[i], clip[(i + 1) % n]
        inp, out = out, []
        if not inp:
            break
        prev = inp[-1]
        prev_side = _cross(a, b, prev)
        for cur in inp:
            side = _cross(a, b, cur)
            if side >= 0:
                if prev_side < 0:
                    out.append(prev + (cur - prev) * (prev_side / (prev_side - side)))
                out.append(cur)
            elif prev_side >= 0:
                out.append(prev + (cur - prev) * (prev_side / (prev_side - side)))
            prev, prev_side = cur, side
    return np.array(out).reshape(-1, 2)


def _interval_overlap(a: tuple[float, float], b: tuple[float, float]) -> float:
    return max(0.0, min(a[1], b[1]) - max(a[0], b[0]))


def bev_intersection(a: Box3D, b: Box3D) -> float:
    d = normalize_yaw(a.yaw - b.yaw)
    if d == 0.0 or d == -math.pi:
        # parallel footprints: intersect axis-aligned rectangles in a's frame
        c, s = math.cos(a.yaw), math.sin(a.yaw)
        off = b.center[:2] - a.center[:2]
        lx, ly = c * off[0] + s * off[1], -s * off[0] + c * off[1]
        ox = _interval_overlap((-a.size[0] / 2, a.size[0] / 2), (lx - b.size[0] / 2, lx + b.size[0] / 2))
        oy = _interval_overlap((-a.size[1] / 2, a.size[1] / 2), (ly - b.size[1] / 2, ly + b.size[1] / 2))
        return ox * oy
    return polygon_area(clip_convex(a.bev_corners(), b.bev_corners()))


def iou3d(a: Box3D, b: Box3D) -> float:
    """Volume IoU of two yaw-only oriented boxes."""
    for box in (a, b):
        if not np.all(box.size > 0):
            raise DegenerateBox(f"box sizes must be positive, got {box.size}")
    dz = _interval_overlap(a.z_range(), b.z_range())
    if dz == 0.0:
        return 0.0
    inter = bev_intersection(a, b) * dz
    union = a.volume + b.volume - inter
    return float(min(1.0, max(0.0, inter / union)))


# --- clustering ----------------------------------------------------------


@dataclass(frozen=True)
class ClusterConfig:
    iou_threshold: float = 0.5
    fusion: FusionConfig = field(default_factory=FusionConfig)
    mode: str = SEED

    def __post_init__(self):
        if not 0.0 < self.iou_threshold < 1.0:
            raise ConfigError("iou_threshold must lie in (0, 1)")
        if self.mode not in (SEED, MUTUAL):
            raise ConfigError(f"unknown clustering mode {self.mode!r}")


@dataclass(frozen=True, eq=False)
class BoxCluster:
    seed: Box3D
    members: tuple
    fused: Optional[PseudoLabel] = None

    @property
    def representative(self) -> Box3D:
        return self.seed


def _ranking(boxes: Seq[Box3D]) -> list[int]:
    return sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, boxes[i].teacher_id, boxes[i].box_index, i))


def greedy_cluster(boxes: Seq[Box3D], cfg: ClusterConfig = ClusterConfig()) -> list[BoxCluster]:
    """Partition boxes into clusters grown around the strongest remaining box.

    In ``seed`` mode a box joins when its IoU with the seed reaches the
    threshold; in ``mutual`` mode it must reach it with every member so far.
    """
    order = _ranking(boxes)
    taken = [False] * len(boxes)
    clusters = []
    for pos, i in enumerate(order):
        if taken[i]:
            continue
        taken[i] = True
        members = [boxes[i]]
        for j in order[pos + 1 :]:
            if taken[j]:
                continue
            if cfg.mode == SEED:
                ok = iou3d(boxes[i], boxes[j]) >= cfg.iou_threshold
            else:
                ok = all(iou3d(m, boxes[j]) >= cfg.iou_threshold for m in members)
            if ok:
                taken[j] = True
                members.append(boxes[j])
        clusters.append(BoxCluster(boxes[i], tuple(members)))
    return clusters


def fuse_cluster(cluster: BoxCluster, fusion: FusionConfig = FusionConfig()) -> BoxCluster:
    """Concordance over the members' class probabilities, seed first."""
    if not cluster.members:
        raise ConfigError("cannot fuse an empty cluster")
    probs = []
    for m in cluster.members:
        if m.probs is None:
            raise ConfigError("cluster members need class probabilities")
        probs.append(m.probs)
    return dataclasses.replace(cluster, fused=fuse_point(probs, fusion))


def pseudo_label_frame(
    detections: Iterable[Box3D], cfg: ClusterConfig = ClusterConfig(), keep_deselected: bool = False
) -> list[BoxCluster]:
    """Cluster, fuse and threshold all teachers' boxes of one reference frame."""
    fused = [fuse_cluster(c, cfg.fusion) for c in greedy_cluster(list(detections), cfg)]
    if keep_deselected:
        return fused
    return [c for c in fused if c.fused.selected]


# --- JSON-lines interchange --------------------------------------------


def box_to_dict(box: Box3D) -> dict:
    return {
        "center": box.center.tolist(),
        "size": box.size.tolist(),
        "yaw": box.yaw,
        "probs": None if box.probs is None else box.probs.tolist(),
    }


def box_from_dict(d: dict, teacher_id: int = 0, box_index: int = 0) -> Box3D:
    return Box3D(d["center"], d["size"], d["yaw"], d.get("probs"), teacher_id, box_index)


def detection_record(frame_id: str, teacher_id, boxes: Seq[Box3D]) -> dict:
    return {"frame_id": frame_id, "teacher_id": teacher_id, "boxes": [box_to_dict(b) for b in boxes]}


def fused_detection_record(frame_id: str, clusters: Seq[BoxCluster]) -> dict:
    boxes = []
    for c in clusters:
        d = box_to_dict(c.representative)
        d.update(label=c.fused.label, c=c.fused.confidence, selected=c.fused.selected)
        boxes.append(d)
    return {"frame_id": frame_id, "teacher_id": "fused", "boxes": boxes}
