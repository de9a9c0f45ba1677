"""Point-cloud sequences, rigid poses and SemanticKITTI-style file I/O."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Optional

import numpy as np

from concordance.errors import (
    BoundaryFrame,
    ConfigError,
    DegeneratePose,
    LabelCountMismatch,
    MalformedFile,
    MissingPose,
    RangeExceedsSequence,
    TruncatedFile,
)

if TYPE_CHECKING:
    from concordance.detfuse import Box3D

ORTHONORMAL_TOL = 1e-6
BYTES_PER_POINT = 16


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Point3:
    x: float
    y: float
    z: float
    remission: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite([self.x, self.y, self.z, self.remission])):
            raise ConfigError(f"non-finite point {self}")

    def xyz(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping local coordinates into a parent frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        tr = np.array(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", _frozen(rot))
        object.__setattr__(self, "translation", _frozen(tr))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        c, s = np.cos(yaw), np.sin(yaw)
        return cls(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def check(self) -> None:
        """Raise :class:`DegeneratePose` unless the rotation is proper orthonormal."""
        r = self.rotation
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(self.translation))):
            raise DegeneratePose("pose contains non-finite values")
        if np.max(np.abs(r.T @ r - np.eye(3))) > ORTHONORMAL_TOL:
            raise DegeneratePose("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
            raise DegeneratePose("rotation determinant is not +1")

    def compose(self, other: "Pose") -> "Pose":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64)
        return xyz @ self.rotation.T + self.translation

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


@dataclass(frozen=True, eq=False)
class Scan:
    """One lidar sweep.

    ``points`` is a ``(K, 4)`` float64 array of ``x, y, z, remission``.
    """

    points: np.ndarray
    time_offset: int = 0
    semantic_labels: Optional[np.ndarray] = None
    instance_ids: Optional[np.ndarray] = None
    frame_index: Optional[int] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] not in (3, 4):
            raise ConfigError(f"points must have shape (K, 4), got {pts.shape}")
        if pts.shape[1] == 3:
            pts = np.hstack([pts, np.zeros((len(pts), 1))])
        if not np.all(np.isfinite(pts)):
            raise ConfigError("scan contains non-finite coordinates")
        object.__setattr__(self, "points", _frozen(pts))
        for name in ("semantic_labels", "instance_ids"):
            lab = getattr(self, name)
            if lab is None:
                continue
            lab = np.array(lab, dtype=np.int64).reshape(-1)
            if len(lab) != len(pts):
                raise LabelCountMismatch(f"{name}: {len(lab)} labels for {len(pts)} points")
            object.__setattr__(self, name, _frozen(lab))
        object.__setattr__(self, "time_offset", int(self.time_offset))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    def point(self, i: int) -> Point3:
        return Point3(*(float(v) for v in self.points[i]))

    def with_points(self, xyz: np.ndarray) -> "Scan":
        pts = self.points.copy()
        pts[:, :3] = xyz
        return dataclasses.replace(self, points=pts)


@dataclass(frozen=True, eq=False)
class Sequence:
    """Time-ordered scans ``X_{-N..N}`` around a reference scan.

    ``poses[i]`` maps the coordinates of ``scans[i]`` into the world frame.
    After :func:`align_sequence` every scan lives in the reference frame and
    all poses equal the reference pose.
    """

    scans: tuple
    poses: tuple
    reference_index: int
    box_labels: Optional[tuple[Box3D, ...]] = None
    aligned: bool = False
    sequence_id: str = ""

    def __post_init__(self):
        scans = tuple(self.scans)
        poses = tuple(self.poses)
        object.__setattr__(self, "scans", scans)
        object.__setattr__(self, "poses", poses)
        if self.box_labels is not None:
            object.__setattr__(self, "box_labels", tuple(self.box_labels))
        if len(poses) != len(scans):
            raise MissingPose(f"{len(scans)} scans but {len(poses)} poses")
        offsets = [s.time_offset for s in scans]
        if any(b <= a for a, b in zip(offsets, offsets[1:])):
            raise ConfigError(f"scans not strictly ordered by time offset: {offsets}")
        if offsets.count(0) != 1:
            raise ConfigError("exactly one scan must have time offset 0")
        if not 0 <= self.reference_index < len(scans) or offsets[self.reference_index] != 0:
            raise ConfigError("reference_index must point at the time-offset-0 scan")

    @property
    def reference(self) -> Scan:
        return self.scans[self.reference_index]

    @property
    def past(self) -> int:
        return -self.scans[0].time_offset

    @property
    def future(self) -> int:
        return self.scans[-1].time_offset

    @property
    def offsets(self) -> list[int]:
        return [s.time_offset for s in self.scans]

    def scan_at(self, t: int) -> Scan:
        return self.scans[self.offsets.index(t)]


def align_sequence(seq: Sequence) -> Sequence:
    """Express every scan in the reference scan's coordinate frame."""
    ref_pose = seq.poses[seq.reference_index]
    for pose in seq.poses:
        if pose is None:
            raise MissingPose(f"sequence {seq.sequence_id!r} has a scan without pose")
        pose.check()
    ref_inv = ref_pose.inverse()
    scans = []
    for i, (scan, pose) in enumerate(zip(seq.scans, seq.poses)):
        if i == seq.reference_index or pose == ref_pose:
            scans.append(scan)
            continue
        rel = ref_inv.compose(pose)
        scans.append(scan.with_points(rel.apply(scan.xyz)))
    return dataclasses.replace(seq, scans=tuple(scans), poses=(ref_pose,) * len(scans), aligned=True)


def window(seq: Sequence, past: int, future: int) -> Sequence:
    """Crop the sequence to time offsets ``[-past, future]``."""
    if past < 0 or future < 0:
        raise ConfigError("window bounds must be non-negative")
    if past > seq.past or future > seq.future:
        raise RangeExceedsSequence(
            f"window [-{past}, {future}] exceeds sequence range [-{seq.past}, {seq.future}]"
        )
    keep = [i for i, s in enumerate(seq.scans) if -past <= s.time_offset <= future]
    return dataclasses.replace(
        seq,
        scans=tuple(seq.scans[i] for i in keep),
        poses=tuple(seq.poses[i] for i in keep),
        reference_index=keep.index(seq.reference_index),
    )


# --- SemanticKITTI layout -------------------------------------------------


def read_bin(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % BYTES_PER_POINT:
        raise TruncatedFile(f"{path}: {len(raw)} bytes is not a multiple of {BYTES_PER_POINT}")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    if not np.all(np.isfinite(pts)):
        raise MalformedFile(f"{path}: non-finite coordinates")
    return pts


def write_bin(path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[1] == 3:
        pts = np.hstack([pts, np.zeros((len(pts), 1))])
    Path(path).write_bytes(pts.astype("<f4").tobytes())


def split_label(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    raw = np.asarray(raw, dtype=np.uint32)
    return (raw & 0xFFFF).astype(np.int64), (raw >> 16).astype(np.int64)


def join_label(semantic: np.ndarray, instance: Optional[np.ndarray] = None) -> np.ndarray:
    sem = np.asarray(semantic, dtype=np.int64)
    inst = np.zeros_like(sem) if instance is None else np.asarray(instance, dtype=np.int64)
    if np.any((sem < 0) | (sem > 0xFFFF)) or np.any((inst < 0) | (inst > 0xFFFF)):
        raise ConfigError("label components must fit in 16 bits")
    return ((inst << 16) | sem).astype(np.uint32)


def read_label(path, expected_count: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise TruncatedFile(f"{path}: {len(raw)} bytes is not a multiple of 4")
    values = np.frombuffer(raw, dtype="<u4")
    if expected_count is not None and len(values) != expected_count:
        raise LabelCountMismatch(f"{path}: {len(values)} labels for {expected_count} points")
    return split_label(values)


def write_label(path, semantic: np.ndarray, instance: Optional[np.ndarray] = None) -> None:
    Path(path).write_bytes(join_label(semantic, instance).astype("<u4").tobytes())


def _parse_3x4(values: list[str], where: str) -> np.ndarray:
    if len(values) != 12:
        raise MalformedFile(f"{where}: expected 12 values, got {len(values)}")
    try:
        m = np.array([float(v) for v in values], dtype=np.float64).reshape(3, 4)
    except ValueError as exc:
        raise MalformedFile(f"{where}: {exc}") from None
    if not np.all(np.isfinite(m)):
        raise MalformedFile(f"{where}: non-finite value")
    out = np.eye(4)
    out[:3] = m
    return out


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="ascii")
    except UnicodeDecodeError as exc:
        raise MalformedFile(f"{path}: not a text file ({exc.reason} at byte {exc.start})") from None


def read_poses(path) -> list[np.ndarray]:
    lines = [ln for ln in _read_text(path).splitlines() if ln.strip()]
    return [_parse_3x4(ln.split(), f"{path}:{i + 1}") for i, ln in enumerate(lines)]


def read_calib(path) -> np.ndarray:
    for ln in _read_text(path).splitlines():
        key, _, rest = ln.partition(":")
        if key.strip() == "Tr":
            return _parse_3x4(rest.split(), f"{path}:Tr")
    raise MalformedFile(f"{path}: no 'Tr:' entry")


def _format_3x4(m: np.ndarray) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(m)[:3].reshape(-1))


def _frame_name(i: int) -> str:
    return f"{i:06d}"


def load_kitti_sequence(dir_path, center_frame_index: int, N: int, sequence_id: str = "") -> Sequence:
    """Load ``2N+1`` frames centred on ``center_frame_index``.

    Camera-frame poses from ``poses.txt`` are converted to the lidar frame
    with ``Tr^-1 @ P @ Tr``.
    """
    root = Path(dir_path)
    if N < 0:
        raise ConfigError("N must be non-negative")
    n_frames = len(list((root / "velodyne").glob("*.bin")))
    if center_frame_index - N < 0 or center_frame_index + N >= n_frames:
        raise BoundaryFrame(
            f"frame {center_frame_index} needs {N} frames on either side; {n_frames} frames available"
        )
    cam_poses = read_poses(root / "poses.txt")
    if len(cam_poses) < center_frame_index + N + 1:
        raise MissingPose(f"{root / 'poses.txt'} has {len(cam_poses)} poses")
    tr = read_calib(root / "calib.txt")
    tr_inv = np.linalg.inv(tr)
    scans, poses = [], []
    for t in range(-N, N + 1):
        idx = center_frame_index + t
        pts = read_bin(root / "velodyne" / f"{_frame_name(idx)}.bin")
        sem = inst = None
        label_path = root / "labels" / f"{_frame_name(idx)}.label"
        if label_path.exists():
            sem, inst = read_label(label_path, len(pts))
        scans.append(Scan(pts, t, sem, inst, frame_index=idx))
        poses.append(Pose.from_matrix(tr_inv @ cam_poses[idx] @ tr))
    return Sequence(tuple(scans), tuple(poses), N, sequence_id=sequence_id or root.name)


def write_kitti_sequence(seq: Sequence, dir_path, calib: Optional[np.ndarray] = None) -> Path:
    """Write ``seq`` as frames ``0..len-1`` in SemanticKITTI layout."""
    root = Path(dir_path)
    (root / "velodyne").mkdir(parents=True, exist_ok=True)
    tr = np.eye(4) if calib is None else np.asarray(calib, dtype=np.float64)
    tr_inv = np.linalg.inv(tr)
    pose_lines = []
    for i, (scan, pose) in enumerate(zip(seq.scans, seq.poses)):
        if pose is None:
            raise MissingPose(f"scan {i} has no pose")
        write_bin(root / "velodyne" / f"{_frame_name(i)}.bin", scan.points)
        if scan.semantic_labels is not None:
            (root / "labels").mkdir(exist_ok=True)
            write_label(root / "labels" / f"{_frame_name(i)}.label", scan.semantic_labels, scan.instance_ids)
        pose_lines.append(_format_3x4(tr @ pose.matrix() @ tr_inv))
    (root / "poses.txt").write_text("\n".join(pose_lines) + "\n")
    (root / "calib.txt").write_text("Tr: " + _format_3x4(tr) + "\n")
    return root
