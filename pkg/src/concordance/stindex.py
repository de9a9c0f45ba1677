"""Spatio-temporal radius neighbourhoods over aligned point-cloud sequences.

A reference point ``x0`` collects every point ``x_t`` of scan ``t`` with
``|x_t - x0| <= r(|t|)``, where the radius grows with the time offset.
Each time offset gets its own uniform voxel hash grid whose cell edge is
that offset's radius, so a query only visits the 27 cells around ``x0``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from concordance.errors import ConfigError, RangeExceedsIndex, UnalignedSequence
from concordance.seqcloud import Point3, Sequence

_BIAS = 1 << 20
_MASK = (1 << 21) - 1
_DELTAS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
# keeps floor(x / cell) within one cell of floor(q / cell) when |x - q| == r
_CELL_PAD = 1.0 + 1e-9


@dataclass(frozen=True)
class RadiusFn:
    """Affine radius ``r(|t|) = r0 + slope * |t|``."""

    r0: float = 1.0
    slope: float = 0.5

    def __post_init__(self):
        if not self.r0 > 0:
            raise ConfigError(f"r0 must be positive, got {self.r0}")
        if not self.slope >= 0:
            raise ConfigError(f"slope must be non-negative, got {self.slope}")

    def __call__(self, t: int) -> float:
        return self.r0 + self.slope * abs(t)


@dataclass(frozen=True, eq=False)
class Neighborhood:
    """Neighbours of a single query point, ordered by (time offset, point index)."""

    center: np.ndarray
    points: np.ndarray
    time_offsets: np.ndarray
    point_indices: np.ndarray

    @property
    def relative(self) -> np.ndarray:
        return self.points[:, :3] - self.center

    def __len__(self) -> int:
        return len(self.time_offsets)

    def members(self) -> list[tuple[Point3, int, np.ndarray]]:
        rel = self.relative
        return [
            (Point3(*map(float, p)), int(t), rel[i])
            for i, (p, t) in enumerate(zip(self.points, self.time_offsets))
        ]

    def features(self, time_scale: float = 1.0) -> np.ndarray:
        """``(k, 4)`` rows of ``(dx, dy, dz, t * time_scale)``."""
        return np.hstack([self.relative, (self.time_offsets * time_scale)[:, None]])


@dataclass(frozen=True, eq=False)
class NeighborhoodBatch:
    """Neighbourhoods of many query points in CSR layout.

    Rows ``ptr[q]:ptr[q+1]`` belong to query ``q``; inside a query rows are
    ordered by time offset, then by point index within the scan.
    """

    ptr: np.ndarray
    time_offsets: np.ndarray
    point_indices: np.ndarray
    relative: np.ndarray

    @property
    def num_queries(self) -> int:
        return len(self.ptr) - 1

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.ptr)

    def features(self, time_scale: float = 1.0) -> np.ndarray:
        return np.hstack([self.relative, (self.time_offsets * time_scale)[:, None]])

    def members(self, q: int) -> set[tuple[int, int]]:
        sl = slice(self.ptr[q], self.ptr[q + 1])
        return set(zip(self.time_offsets[sl].tolist(), self.point_indices[sl].tolist()))


def _pack(cells: np.ndarray) -> np.ndarray:
    c = cells + _BIAS
    return (c[..., 0] << 42) | (c[..., 1] << 21) | c[..., 2]


class _Grid:
    def __init__(self, xyz: np.ndarray, radius: float):
        self.xyz = xyz
        self.radius = float(radius)
        self.cell = self.radius * _CELL_PAD
        cells = np.floor(xyz / self.cell).astype(np.int64)
        if len(cells) and np.max(np.abs(cells)) >= _BIAS:
            raise ConfigError("point coordinates too large for the voxel hash")
        keys = _pack(cells)
        self.order = np.argsort(keys, kind="stable")
        sorted_keys = keys[self.order]
        self.keys, first = np.unique(sorted_keys, return_index=True)
        self.starts = np.append(first, len(keys)).astype(np.int64)

    def query(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (query row, point index, distance) for all pairs within the radius."""
        empty = np.zeros(0, dtype=np.int64)
        if len(self.keys) == 0 or len(q) == 0:
            return empty, empty, np.zeros(0)
        qcells = np.floor(q / self.cell).astype(np.int64)
        q_rows, p_rows = [], []
        for d in _DELTAS:
            keys = _pack(qcells + d)
            pos = np.searchsorted(self.keys, keys)
            pos_c = np.minimum(pos, len(self.keys) - 1)
            hit = self.keys[pos_c] == keys
            if not hit.any():
                continue
            qi = np.nonzero(hit)[0]
            start = self.starts[pos_c[hit]]
            counts = self.starts[pos_c[hit] + 1] - start
            total = int(counts.sum())
            first = np.repeat(np.cumsum(counts) - counts, counts)
            within = np.arange(total) - first
            q_rows.append(np.repeat(qi, counts))
            p_rows.append(self.order[np.repeat(start, counts) + within])
        if not q_rows:
            return empty, empty, np.zeros(0)
        qr = np.concatenate(q_rows)
        pr = np.concatenate(p_rows)
        dist = np.linalg.norm(self.xyz[pr] - q[qr], axis=1)
        keep = dist <= self.radius
        return qr[keep], pr[keep], dist[keep]


class SpatioTemporalIndex:
    """Immutable per-time-offset voxel grids over an aligned sequence."""

    def __init__(self, seq: Sequence, radius: RadiusFn, max_per_offset: Optional[int] = None):
        if not seq.aligned:
            raise UnalignedSequence(f"sequence {seq.sequence_id!r} must be aligned before indexing")
        if max_per_offset is not None and max_per_offset < 1:
            raise ConfigError("max_per_offset must be >= 1")
        self.radius = radius
        self.max_per_offset = max_per_offset
        self.offsets = tuple(seq.offsets)
        self._points = {s.time_offset: s.points for s in seq.scans}
        self._grids = {s.time_offset: _Grid(s.xyz, radius(s.time_offset)) for s in seq.scans}

    def scan_points(self, t: int) -> np.ndarray:
        return self._points[t]

    def _check_range(self, past: int, future: int) -> list[int]:
        if past < 0 or future < 0:
            raise ConfigError("past and future must be non-negative")
        wanted = list(range(-past, future + 1))
        missing = [t for t in wanted if t not in self._grids]
        if missing:
            raise RangeExceedsIndex(f"offsets {missing} are not indexed (have {list(self.offsets)})")
        return wanted

    def query(self, queries: np.ndarray, past: int, future: int) -> NeighborhoodBatch:
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        per_t = []
        for t in self._check_range(past, future):
            qr, pr, dist = self._grids[t].query(q)
            if self.max_per_offset is not None and len(qr):
                # nearest first, smaller point index on ties
                order = np.lexsort((pr, dist, qr))
                qr, pr = qr[order], pr[order]
                group_start = np.searchsorted(qr, qr, side="left")
                rank = np.arange(len(qr)) - group_start
                keep = rank < self.max_per_offset
                qr, pr = qr[keep], pr[keep]
            per_t.append((np.full(len(qr), t, dtype=np.int64), qr, pr))
        if per_t:
            tt = np.concatenate([p[0] for p in per_t])
            qr = np.concatenate([p[1] for p in per_t])
            pr = np.concatenate([p[2] for p in per_t])
        else:
            tt = qr = pr = np.zeros(0, dtype=np.int64)
        order = np.lexsort((pr, tt, qr))
        tt, qr, pr = tt[order], qr[order], pr[order]
        ptr = np.searchsorted(qr, np.arange(len(q) + 1), side="left").astype(np.int64)
        rel = np.zeros((len(tt), 3))
        for t in np.unique(tt):
            m = tt == t
            rel[m] = self._points[int(t)][pr[m], :3] - q[qr[m]]
        return NeighborhoodBatch(ptr, tt, pr, rel)

    def neighbors(self, x0: Union[Point3, np.ndarray], past: int, future: int) -> Neighborhood:
        center = x0.xyz() if isinstance(x0, Point3) else np.asarray(x0, dtype=np.float64).reshape(3)
        batch = self.query(center[None], past, future)
        pts = np.array(
            [self._points[int(t)][i] for t, i in zip(batch.time_offsets, batch.point_indices)]
        ).reshape(-1, 4)
        return Neighborhood(center, pts, batch.time_offsets, batch.point_indices)


def build_index(seq: Sequence, radius: Optional[RadiusFn] = None, max_per_offset: Optional[int] = None) -> SpatioTemporalIndex:
    return SpatioTemporalIndex(seq, radius or RadiusFn(), max_per_offset)

