"""Synthetic labelled lidar sequences and parametric noisy teachers.

The world is a flat ground patch with static walls/posts, vehicles and
pedestrians moving at constant velocity, and an ego sensor driving through
it.  Every object carries a fixed set of surface samples in its own frame;
each frame observes them with random dropout and Gaussian jitter.

Teachers do not learn anything.  A teacher of temporal range ``n`` errs on
a point with probability ``eps = max(0, base_error - range_gain * n)``; an
error emits a distribution peaked on a uniformly drawn wrong class, and
with a flatter peak than a correct answer.
"""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence as Seq

import numpy as np

from concordance.concord import TeacherOutput
from concordance.detfuse import Box3D
from concordance.errors import ConfigError, MissingGroundTruth
from concordance.seqcloud import Pose, Scan, Sequence

GROUND, STATIC, VEHICLE, PEDESTRIAN = 0, 1, 2, 3
CLASS_NAMES = ("ground", "static", "vehicle", "pedestrian")


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    num_frames_half: int = 3
    num_static: int = 6
    num_vehicles: int = 3
    num_pedestrians: int = 3
    points_per_object: int = 60
    ground_points: int = 300
    extent: float = 12.0
    noise: float = 0.02
    dropout: float = 0.1
    vehicle_speed: tuple = (0.4, 1.2)
    pedestrian_speed: tuple = (0.1, 0.3)
    ego_speed: float = 0.5
    ego_yaw_rate: float = 0.01
    num_classes: int = 4

    def __post_init__(self):
        if self.noise < 0:
            raise ConfigError("noise sigma must be non-negative")
        if min(self.num_static, self.num_vehicles, self.num_pedestrians, self.points_per_object, self.ground_points) < 0:
            raise ConfigError("counts must be non-negative")
        if self.num_frames_half < 0:
            raise ConfigError("num_frames_half must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.num_classes != len(CLASS_NAMES):
            raise ConfigError(f"the synthetic world has exactly {len(CLASS_NAMES)} classes")
        speeds = (*self.vehicle_speed, *self.pedestrian_speed, self.ego_speed, self.ego_yaw_rate)
        if not np.all(np.isfinite(speeds)):
            raise ConfigError("speeds must be finite")

    @property
    def num_frames(self) -> int:
        return 2 * self.num_frames_half + 1


@dataclass(frozen=True, eq=False)
class _Object:
    label: int
    center: np.ndarray  # world position at t = 0
    size: np.ndarray
    yaw: float
    velocity: np.ndarray
    samples: np.ndarray  # surface points in the object frame


def _box_surface(rng: np.random.Generator, size: np.ndarray, n: int, faces=("sides", "top")) -> np.ndarray:
    l, w, h = size
    areas, makers = [], []
    if "sides" in faces:
        areas += [l * h, l * h, w * h, w * h]
        makers += [
            lambda u, v: np.c_[(u - 0.5) * l, np.full_like(u, w / 2), v * h],
            lambda u, v: np.c_[(u - 0.5) * l, np.full_like(u, -w / 2), v * h],
            lambda u, v: np.c_[np.full_like(u, l / 2), (u - 0.5) * w, v * h],
            lambda u, v: np.c_[np.full_like(u, -l / 2), (u - 0.5) * w, v * h],
        ]
    if "top" in faces:
        areas.append(l * w)
        makers.append(lambda u, v: np.c_[(u - 0.5) * l, (v - 0.5) * w, np.full_like(u, h)])
    p = np.asarray(areas) / np.sum(areas)
    face = rng.choice(len(areas), size=n, p=p)
    u, v = rng.random(n), rng.random(n)
    out = np.zeros((n, 3))
    for f, make in enumerate(makers):
        m = face == f
        out[m] = make(u[m], v[m])
    return out


def _rot2(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _make_objects(cfg: WorldConfig, rng: np.random.Generator) -> list[_Object]:
    objs = []
    e = cfg.extent
    n = cfg.points_per_object
    for _ in range(cfg.num_static):
        if rng.random() < 0.5:
            size = np.array([rng.uniform(3.0, 6.0), 0.25, rng.uniform(2.0, 3.0)])
        else:
            size = np.array([0.3, 0.3, rng.uniform(2.5, 4.0)])
        yaw = rng.uniform(-np.pi, np.pi)
        center = np.array([rng.uniform(-e, e), rng.uniform(-e, e), 0.0])
        objs.append(_Object(STATIC, center, size, yaw, np.zeros(3), _box_surface(rng, size, n)))
    movers = [(VEHICLE, cfg.vehicle_speed)] * cfg.num_vehicles + [(PEDESTRIAN, cfg.pedestrian_speed)] * cfg.num_pedestrians
    for label, (lo, hi) in movers:
        if label == VEHICLE:
            size = np.array([rng.uniform(3.8, 4.8), rng.uniform(1.7, 2.0), rng.uniform(1.4, 1.7)])
            count = 2 * n
        else:
            size = np.array([rng.uniform(0.5, 0.7), rng.uniform(0.5, 0.7), rng.uniform(1.6, 1.9)])
            count = n
        yaw = rng.uniform(-np.pi, np.pi)
        speed = rng.uniform(lo, hi)
        velocity = speed * np.array([np.cos(yaw), np.sin(yaw), 0.0])
        center = np.array([rng.uniform(-e, e), rng.uniform(-e, e), 0.0])
        objs.append(_Object(label, center, size, yaw, velocity, _box_surface(rng, size, count)))
    return objs


def ego_pose(cfg: WorldConfig, t: int) -> Pose:
    yaw = cfg.ego_yaw_rate * t
    return Pose(_rot2(yaw), np.array([cfg.ego_speed * t, 0.0, 0.0]))


def generate_sequence(cfg: WorldConfig, sequence_id: str = "") -> Sequence:
    """Labelled sequence of ``2N+1`` scans in sensor coordinates, with world poses."""
    rng = np.random.default_rng(cfg.seed)
    objs = _make_objects(cfg, rng)
    e = cfg.extent
    ground = np.c_[rng.uniform(-e, e, cfg.ground_points), rng.uniform(-e, e, cfg.ground_points), np.zeros(cfg.ground_points)]
    remission = {GROUND: 0.2, STATIC: 0.5, VEHICLE: 0.8, PEDESTRIAN: 0.4}

    scans, poses = [], []
    N = cfg.num_frames_half
    for t in range(-N, N + 1):
        parts, labels, inst = [ground], [np.full(len(ground), GROUND)], [np.zeros(len(ground), dtype=np.int64)]
        for k, o in enumerate(objs):
            world = o.samples @ _rot2(o.yaw).T + o.center + o.velocity * t
            parts.append(world)
            labels.append(np.full(len(world), o.label))
            inst.append(np.full(len(world), k + 1))
        xyz = np.vstack(parts)
        sem = np.concatenate(labels)
        ins = np.concatenate(inst)
        keep = rng.random(len(xyz)) >= cfg.dropout
        xyz, sem, ins = xyz[keep], sem[keep], ins[keep]
        if cfg.noise > 0:
            xyz = xyz + rng.normal(0.0, cfg.noise, size=xyz.shape)
        pose = ego_pose(cfg, t)
        local = (xyz - pose.translation) @ pose.rotation
        rem = np.array([remission[int(s)] for s in sem]) if len(sem) else np.zeros(0)
        scans.append(Scan(np.c_[local, rem], t, sem, ins, frame_index=t + N))
        poses.append(pose)

    boxes = []
    for k, o in enumerate(objs):
        if o.label in (VEHICLE, PEDESTRIAN):
            probs = np.zeros(cfg.num_classes)
            probs[o.label] = 1.0
            center = o.center + np.array([0.0, 0.0, o.size[2] / 2.0])
            boxes.append(Box3D(center, o.size, o.yaw, probs, box_index=k))
    return Sequence(tuple(scans), tuple(poses), N, box_labels=tuple(boxes), sequence_id=sequence_id)


def sequence_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def generate_dataset(cfg: WorldConfig, count: int, prefix: str = "seq") -> list[Sequence]:
    return [
        generate_sequence(dataclasses.replace(cfg, seed=sequence_seed(cfg.seed, i)), f"{prefix}{i:04d}")
        for i in range(count)
    ]


# --- synthetic teachers -------------------------------------------------


@dataclass(frozen=True)
class DetectionNoise:
    center_sigma: float = 0.15
    size_sigma: float = 0.05
    yaw_sigma: float = 0.03
    drop_rate: float = 0.1
    false_rate: float = 0.3  # expected hallucinated boxes per frame


@dataclass(frozen=True)
class SyntheticTeacherSpec:
    temporal_range: int
    base_error: float = 0.3
    range_gain: float = 0.06
    temperature: float = 0.25
    seed: int = 0
    wrong_margin: float = 0.5
    jitter: float = 0.4
    patch_radius: float = 0.0
    num_classes: int = 4
    detection: DetectionNoise = field(default_factory=DetectionNoise)

    def __post_init__(self):
        if self.temporal_range < 0:
            raise ConfigError("temporal range must be non-negative")
        if not 0.0 <= self.base_error <= 1.0 or self.range_gain < 0:
            raise ConfigError("need base_error in [0, 1] and range_gain >= 0")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if not 0.0 <= self.jitter < self.wrong_margin <= 1.0:
            raise ConfigError("need 0 <= jitter < wrong_margin <= 1 so the argmax is preserved")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")

    @property
    def error_rate(self) -> float:
        return float(min(1.0, max(0.0, self.base_error - self.range_gain * self.temporal_range)))

    @property
    def name(self) -> str:
        return f"T{self.temporal_range}s{self.seed}"


def _stream_key(text: str) -> int:
    return zlib.crc32(text.encode())


def _corrupt(spec: SyntheticTeacherSpec, gt: np.ndarray, rng: np.random.Generator, groups: Optional[np.ndarray] = None) -> np.ndarray:
    """Probability rows for ground-truth classes ``gt`` under the corruption model."""
    C = spec.num_classes
    n = len(gt)
    n_draw = n if groups is None else int(groups.max()) + 1 if n else 0
    u = rng.random(n_draw)
    shift = rng.integers(1, C, size=n_draw)
    jit = rng.random((n, C)) * spec.jitter
    if groups is not None:
        u, shift = u[groups], shift[groups]
    wrong = u < spec.error_rate
    target = np.where(wrong, (gt + shift) % C, gt)
    margin = np.where(wrong, spec.wrong_margin, 1.0)
    logits = jit
    logits[np.arange(n), target] += margin
    z = logits / spec.temperature
    z -= z.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def synth_teacher_predict(spec: SyntheticTeacherSpec, seq: Sequence) -> TeacherOutput:
    """Noisy class probabilities for every point of the reference scan."""
    ref = seq.reference
    if ref.semantic_labels is None:
        raise MissingGroundTruth(f"sequence {seq.sequence_id!r} has no reference labels")
    gt = ref.semantic_labels
    if len(gt) and (gt.min() < 0 or gt.max() >= spec.num_classes):
        raise ConfigError("ground-truth labels outside the teacher's class range")
    rng = np.random.default_rng([spec.seed, _stream_key(seq.sequence_id), 0])
    groups = None
    if spec.patch_radius > 0 and len(gt):
        cells = np.floor(ref.xyz / spec.patch_radius).astype(np.int64)
        _, groups = np.unique(cells, axis=0, return_inverse=True)
        groups = groups.reshape(-1)
    return TeacherOutput(spec.name, spec.temporal_range, _corrupt(spec, gt, rng, groups))


def synth_teacher_detect(spec: SyntheticTeacherSpec, seq: Sequence, teacher_id: int = 0) -> list[Box3D]:
    """Perturbed, partly dropped and partly hallucinated reference-frame boxes."""
    if seq.box_labels is None:
        raise MissingGroundTruth(f"sequence {seq.sequence_id!r} has no box labels")
    det = spec.detection
    rng = np.random.default_rng([spec.seed, _stream_key(seq.sequence_id), 1])
    gts = list(seq.box_labels)
    gt_cls = np.array([b.label for b in gts], dtype=np.int64)
    probs = _corrupt(spec, gt_cls, rng)
    keep = rng.random(len(gts)) >= det.drop_rate
    out = []
    for i, g in enumerate(gts):
        c_noise = rng.normal(0.0, det.center_sigma, 3) * np.array([1.0, 1.0, 0.3])
        s_noise = np.exp(rng.normal(0.0, det.size_sigma, 3))
        y_noise = rng.normal(0.0, det.yaw_sigma)
        if keep[i]:
            out.append(Box3D(g.center + c_noise, g.size * s_noise, g.yaw + y_noise, probs[i], teacher_id, len(out)))
    n_false = rng.poisson(det.false_rate)
    if n_false:
        pts = seq.reference.xyz
        lo, hi = (pts.min(axis=0), pts.max(axis=0)) if len(pts) else (np.full(3, -10.0), np.full(3, 10.0))
        fake_cls = rng.integers(0, spec.num_classes, size=n_false)
        fake_probs = _corrupt(dataclasses.replace(spec, base_error=1.0, range_gain=0.0), fake_cls, rng)
        for k in range(n_false):
            center = np.array([rng.uniform(lo[0], hi[0]), rng.uniform(lo[1], hi[1]), 0.8])
            size = np.array([rng.uniform(3.8, 4.8), rng.uniform(1.7, 2.0), rng.uniform(1.4, 1.7)])
            out.append(Box3D(center, size, rng.uniform(-np.pi, np.pi), fake_probs[k], teacher_id, len(out)))
    return out


def make_ensemble(n: int, count: int, seeds: Optional[Seq[int]] = None, base: Optional[SyntheticTeacherSpec] = None) -> list[SyntheticTeacherSpec]:
    """Teachers sharing one temporal range, differing only by seed."""
    if count < 1:
        raise ConfigError("ensemble needs at least one teacher")
    base = base or SyntheticTeacherSpec(n)
    seeds = list(seeds) if seeds is not None else [base.seed + i for i in range(count)]
    if len(seeds) != count or len(set(seeds)) != count:
        raise ConfigError("ensemble members need distinct seeds")
    return [dataclasses.replace(base, temporal_range=n, seed=s) for s in seeds]


def make_concordance(ranges: Seq[int], base: Optional[SyntheticTeacherSpec] = None, seed: Optional[int] = None) -> list[SyntheticTeacherSpec]:
    """One teacher per distinct temporal range."""
    if len(set(ranges)) != len(ranges):
        raise ConfigError("concordance ranges must be distinct")
    base = base or SyntheticTeacherSpec(max(ranges))
    s0 = base.seed if seed is None else seed
    return [dataclasses.replace(base, temporal_range=n, seed=s0 + i) for i, n in enumerate(ranges)]
