"""Scan-to-observation pipeline.

Turns one labelled point cloud plus its sensor pose into at most one
height observation per ground cell:

1. relabel points inside exclusion boxes (sensor frame),
2. rigidly transform the terrain-labelled points to the map frame,
3. voxelize at the grid resolution, keeping the max z per voxel,
4. raycast from the sensor to every occupied voxel, marking crossed
   voxels free (occupied beats free),
5. reduce each (ix, iy) column: a column whose lowest entry is free is
   dropped as suspected airborne noise; otherwise the run of
   consecutive occupied voxels from the bottom yields its max
   unquantized z.

The module exposes the five steps individually (dict/object based, used
heavily by tests) and `process_scan` / `process_scan_arrays`, which run
the same procedure through dense-array kernels for speed.  The two
paths produce identical observations.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from terramap import kernels
from terramap.errors import InvalidPoseError
from terramap.hmm_grid import GridConfig

# Point label codes (the CSV on-disk encoding uses the same integers).
TERRAIN = 0
MACHINE = 1
AGENT = 2
EXCLUDED = 3

LABEL_NAMES = {TERRAIN: "terrain", MACHINE: "machine", AGENT: "agent", EXCLUDED: "excluded"}
LABEL_CODES = {name: code for code, name in LABEL_NAMES.items()}

# Poses whose quaternion norm strays further than this from 1 are
# treated as corrupt rather than merely unnormalized.
_QUAT_NORM_TOL = 1e-3

VoxelKey = tuple[int, int, int]
CellKey = tuple[int, int]


class ColumnEntry(NamedTuple):
    iz: int
    occupied: bool
    z: float | None  # max unquantized z for occupied entries, None for free


class HeightObservation(NamedTuple):
    cell: CellKey
    height: float


@dataclass(frozen=True)
class ColumnObservation:
    """Ordered free/occupied record for one (ix, iy) column."""

    cell: CellKey
    entries: list[ColumnEntry]


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, inclusive of its min corner, exclusive of max."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        if any(l > h for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"box min corner exceeds max corner: {self.lo} vs {self.hi}")

    def contains(self, points: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        return np.all((points >= lo) & (points < hi), axis=1)


@dataclass(frozen=True)
class SensorPose:
    """Rigid sensor-to-map transform at one scan.

    The quaternion is (w, x, y, z).  Slightly off-unit quaternions are
    renormalized at construction; anything beyond a small tolerance is
    rejected as corrupt.
    """

    translation: np.ndarray
    rotation: np.ndarray
    timestamp: float = 0.0
    scan_index: int = 0

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        norm = float(np.linalg.norm(q))
        if not math.isfinite(norm) or abs(norm - 1.0) > _QUAT_NORM_TOL:
            raise InvalidPoseError(
                f"quaternion norm {norm!r} too far from 1 at scan {self.scan_index}"
            )
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", q / norm)

    def rotation_matrix(self) -> np.ndarray:
        w, x, y, z = self.rotation
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )


@dataclass(frozen=True)
class LabelledScan:
    """Points in the sensor frame with per-point semantic labels."""

    points: np.ndarray
    labels: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        l = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
        if p.shape[0] != l.shape[0]:
            raise ValueError(
                f"points ({p.shape[0]}) and labels ({l.shape[0]}) differ in length"
            )
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "labels", l)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class MapFrameScan:
    """Terrain points expressed in the map frame."""

    points: np.ndarray
    scan_index: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "points", np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        )


@dataclass
class ScanStats:
    """Per-scan pipeline diagnostics."""

    n_points: int = 0
    n_terrain: int = 0
    n_out_of_band: int = 0
    n_voxels: int = 0
    n_columns: int = 0
    n_columns_dropped: int = 0
    n_observations: int = 0


def exclusion_filter(scan: LabelledScan, boxes: Sequence[Box]) -> LabelledScan:
    """Relabel points inside any box as excluded; other labels persist.

    Boxes are expressed in the sensor frame (they typically wrap the
    machine the sensor is mounted on).  With no boxes the scan is
    returned as-is.
    """
    if not boxes:
        return scan
    labels = scan.labels.copy()
    inside = np.zeros(len(scan), dtype=bool)
    for box in boxes:
        inside |= box.contains(scan.points)
    labels[inside] = EXCLUDED
    return LabelledScan(points=scan.points, labels=labels, timestamp=scan.timestamp)


def transform_to_map(scan: LabelledScan, pose: SensorPose) -> MapFrameScan:
    """Map the terrain-labelled points through the rigid pose transform."""
    terrain = scan.points[scan.labels == TERRAIN]
    r = pose.rotation_matrix()
    mapped = terrain @ r.T + pose.translation
    return MapFrameScan(points=mapped, scan_index=pose.scan_index)


def _voxel_group_max(points: np.ndarray, delta: float):
    """Group points by voxel; keep the point with the max z per voxel.

    Returns (keys, rep) with keys (K, 3) int64 sorted lexicographically
    by (ix, iy, iz) and rep (K, 3) the representative (max-z) point of
    each voxel.  Ties on z resolve to the later point in input order.
    """
    if points.shape[0] == 0:
        return np.empty((0, 3), dtype=np.int64), np.empty((0, 3), dtype=np.float64)
    idx = np.floor(points / delta).astype(np.int64)
    order = np.lexsort((points[:, 2], idx[:, 2], idx[:, 1], idx[:, 0]))
    si = idx[order]
    sp = points[order]
    last = np.empty(si.shape[0], dtype=bool)
    last[:-1] = np.any(si[1:] != si[:-1], axis=1)
    last[-1] = True
    return si[last], sp[last]


def voxelize(scan: MapFrameScan, cfg: GridConfig) -> dict[VoxelKey, float]:
    """Discretize a map-frame scan into occupied voxels.

    Each voxel (half-open ``[i*delta, (i+1)*delta)`` per axis) maps to
    the maximum z among its member points.  Points with z outside the
    ``[h_min, h_max)`` height band are dropped.
    """
    z = scan.points[:, 2]
    in_band = (z >= cfg.h_min) & (z < cfg.h_max)
    keys, rep = _voxel_group_max(scan.points[in_band], cfg.delta)
    return {
        (int(k[0]), int(k[1]), int(k[2])): float(p[2]) for k, p in zip(keys, rep)
    }


def voxel_path(origin: np.ndarray, end: np.ndarray, delta: float) -> list[VoxelKey]:
    """Voxels crossed by the origin->end segment, both endpoints included.

    Step-by-step boundary traversal: starting in the origin's voxel, the
    walk repeatedly advances across whichever axis boundary the segment
    reaches first, ending in the voxel containing `end`.  Uses the same
    arithmetic as the compiled kernel so both agree bit-for-bit.
    """
    ox, oy, oz = (float(origin[0]), float(origin[1]), float(origin[2]))
    ex, ey, ez = (float(end[0]), float(end[1]), float(end[2]))
    v = [math.floor(ox / delta), math.floor(oy / delta), math.floor(oz / delta)]
    tgt = (math.floor(ex / delta), math.floor(ey / delta), math.floor(ez / delta))
    d = (ex - ox, ey - oy, ez - oz)
    o = (ox, oy, oz)

    step = [0, 0, 0]
    t_max = [math.inf, math.inf, math.inf]
    t_del = [math.inf, math.inf, math.inf]
    for ax in range(3):
        if d[ax] > 0.0:
            step[ax] = 1
            t_max[ax] = ((v[ax] + 1) * delta - o[ax]) / d[ax]
            t_del[ax] = delta / d[ax]
        elif d[ax] < 0.0:
            step[ax] = -1
            t_max[ax] = (v[ax] * delta - o[ax]) / d[ax]
            t_del[ax] = -delta / d[ax]

    path = []
    steps_left = sum(abs(v[ax] - tgt[ax]) for ax in range(3))
    while tuple(v) != tgt:
        path.append((v[0], v[1], v[2]))
        if steps_left <= 0:
            break
        steps_left -= 1
        if t_max[0] <= t_max[1] and t_max[0] <= t_max[2]:
            v[0] += step[0]
            t_max[0] += t_del[0]
        elif t_max[1] <= t_max[2]:
            v[1] += step[1]
            t_max[1] += t_del[1]
        else:
            v[2] += step[2]
            t_max[2] += t_del[2]
    path.append(tgt)
    return path


def raycast_observed(
    origin: np.ndarray,
    occupied: Mapping[VoxelKey, float],
    delta: float,
    *,
    endpoints: Mapping[VoxelKey, np.ndarray] | None = None,
) -> dict[CellKey, ColumnObservation]:
    """Label observed space by casting one ray per occupied voxel.

    Every voxel a ray crosses before its terminal voxel is marked free;
    terminal voxels are occupied, and occupied always beats free when
    different rays disagree.  Rays aim at the voxel's representative
    point: the caller can supply exact measurement points via
    `endpoints`; otherwise the voxel's x/y centre at its stored max z
    is used.

    Returns one ColumnObservation per touched (ix, iy) column, entries
    sorted by iz.
    """
    marks: dict[VoxelKey, bool] = {}
    for key in sorted(occupied):
        if endpoints is not None:
            end = np.asarray(endpoints[key], dtype=np.float64)
        else:
            end = np.array(
                [
                    (key[0] + 0.5) * delta,
                    (key[1] + 0.5) * delta,
                    occupied[key],
                ]
            )
        path = voxel_path(origin, end, delta)
        for vox in path[:-1]:
            if vox not in marks:
                marks[vox] = False
        marks[key] = True

    columns: dict[CellKey, list[ColumnEntry]] = {}
    for (ix, iy, iz), occ in marks.items():
        z = occupied.get((ix, iy, iz)) if occ else None
        columns.setdefault((ix, iy), []).append(ColumnEntry(iz, occ, z))
    return {
        cell: ColumnObservation(cell=cell, entries=sorted(entries))
        for cell, entries in sorted(columns.items())
    }


def reduce_columns(
    observed: Mapping[CellKey, ColumnObservation] | Iterable[ColumnObservation],
) -> list[HeightObservation]:
    """Collapse each column to one height, or drop it.

    A column whose lowest entry is free is dropped: measurements above
    observed free space are treated as airborne noise.  Otherwise the
    run of occupied entries with consecutive iz (a free entry or an
    unobserved gap both terminate it) is walked from the bottom and the
    maximum unquantized z over the run is emitted.
    """
    if isinstance(observed, Mapping):
        columns: Iterable[ColumnObservation] = observed.values()
    else:
        columns = observed
    out = []
    for col in columns:
        if not col.entries:
            continue
        first = col.entries[0]
        if not first.occupied:
            continue
        best = first.z
        prev_iz = first.iz
        for entry in col.entries[1:]:
            if entry.iz != prev_iz + 1 or not entry.occupied:
                break
            prev_iz = entry.iz
            if entry.z > best:
                best = entry.z
        out.append(HeightObservation(cell=col.cell, height=float(best)))
    out.sort(key=lambda ob: ob.cell)
    return out


def process_scan_arrays(
    scan: LabelledScan,
    pose: SensorPose,
    cfg: GridConfig,
    boxes: Sequence[Box] = (),
    timings: dict | None = None,
):
    """Fused array implementation of the full per-scan pipeline.

    Returns ``(cells, heights, stats)`` where cells is (m, 2) int64 and
    heights is (m,) float64, ordered by (ix, iy).  Equivalent to
    composing the five public steps, but runs the raycast and column
    reduction through compiled kernels on a dense per-scan grid.
    `timings`, if given, accumulates per-stage seconds under the keys
    "transform", "voxelize", "raycast", "reduce".
    """
    stats = ScanStats(n_points=len(scan))
    t0 = time.perf_counter()
    filtered = exclusion_filter(scan, boxes)
    terrain = filtered.points[filtered.labels == TERRAIN]
    r = pose.rotation_matrix()
    mapped = terrain @ r.T + pose.translation
    stats.n_terrain = mapped.shape[0]
    t1 = time.perf_counter()

    z = mapped[:, 2]
    in_band = (z >= cfg.h_min) & (z < cfg.h_max)
    stats.n_out_of_band = int(mapped.shape[0] - np.count_nonzero(in_band))
    keys, rep = _voxel_group_max(mapped[in_band], cfg.delta)
    stats.n_voxels = keys.shape[0]
    t2 = time.perf_counter()

    if keys.shape[0] == 0:
        if timings is not None:
            timings["transform"] = timings.get("transform", 0.0) + (t1 - t0)
            timings["voxelize"] = timings.get("voxelize", 0.0) + (t2 - t1)
            timings["raycast"] = timings.get("raycast", 0.0)
            timings["reduce"] = timings.get("reduce", 0.0)
        return (
            np.empty((0, 2), dtype=np.int64),
            np.empty(0, dtype=np.float64),
            stats,
        )

    origin = np.ascontiguousarray(pose.translation, dtype=np.float64)
    ix_lo = int(keys[:, 0].min())
    iy_lo = int(keys[:, 1].min())
    iz_lo = int(math.floor(cfg.h_min / cfg.delta))
    nx = int(keys[:, 0].max()) - ix_lo + 1
    ny = int(keys[:, 1].max()) - iy_lo + 1
    nz = int(keys[:, 2].max()) - iz_lo + 1
    grid = np.zeros((nx, ny, nz), dtype=np.uint8)
    kernels.mark_free_paths(
        grid, ix_lo, iy_lo, iz_lo, origin, np.ascontiguousarray(rep), cfg.delta
    )
    grid[keys[:, 0] - ix_lo, keys[:, 1] - iy_lo, keys[:, 2] - iz_lo] = kernels.OCCUPIED
    t3 = time.perf_counter()

    col_break = np.empty(keys.shape[0], dtype=bool)
    col_break[0] = True
    col_break[1:] = (keys[1:, 0] != keys[:-1, 0]) | (keys[1:, 1] != keys[:-1, 1])
    col_start = np.nonzero(col_break)[0]
    col_count = np.diff(np.append(col_start, keys.shape[0]))
    stats.n_columns = col_start.shape[0]

    out_height = np.empty(col_start.shape[0], dtype=np.float64)
    out_valid = np.empty(col_start.shape[0], dtype=np.int64)
    kernels.reduce_occupied_columns(
        grid,
        ix_lo,
        iy_lo,
        iz_lo,
        col_start,
        col_count,
        np.ascontiguousarray(keys[:, 0]),
        np.ascontiguousarray(keys[:, 1]),
        np.ascontiguousarray(keys[:, 2]),
        np.ascontiguousarray(rep[:, 2]),
        out_height,
        out_valid,
    )
    emitted = out_valid == 1
    cells = keys[col_start[emitted]][:, :2]
    heights = out_height[emitted]
    stats.n_observations = int(cells.shape[0])
    stats.n_columns_dropped = stats.n_columns - stats.n_observations
    t4 = time.perf_counter()

    if timings is not None:
        timings["transform"] = timings.get("transform", 0.0) + (t1 - t0)
        timings["voxelize"] = timings.get("voxelize", 0.0) + (t2 - t1)
        timings["raycast"] = timings.get("raycast", 0.0) + (t3 - t2)
        timings["reduce"] = timings.get("reduce", 0.0) + (t4 - t3)
    return cells, heights, stats


def process_scan(
    scan: LabelledScan,
    pose: SensorPose,
    cfg: GridConfig,
    boxes: Sequence[Box] = (),
) -> list[HeightObservation]:
    """Run the whole per-scan pipeline; one HeightObservation per cell."""
    cells, heights, _ = process_scan_arrays(scan, pose, cfg, boxes)
    return [
        HeightObservation(cell=(int(ix), int(iy)), height=float(h))
        for (ix, iy), h in zip(cells, heights)
    ]
