"""Dataset and export file IO.

On-disk dataset layout (written by the simulator, read by the mapper):

    <dataset>/
        scans/000000.csv     x,y,z,label   (sensor-frame points)
        poses.csv            scan_index,timestamp,tx,ty,tz,qw,qx,qy,qz
        truth.json           event + volume records (simulated data only)
        checkpoints/NNNNNN.npy  post-event heightfields referenced by truth.json

Export formats (written by the CLI, all with headers, floats at 9
significant digits):

    snapshot     ix,iy,x_center,y_center,height,confidence   sorted by (ix, iy)
    timeseries   scan_index,timestamp,net_m3,removed_m3,added_m3
    changegrid   ix,iy,dh                                    sorted by (ix, iy)

Every writer here has a matching reader, and writers emit deterministic
bytes for identical inputs.
"""

from __future__ import annotations

import csv
import json
import warnings
from pathlib import Path
from typing import Iterator

import numpy as np
import pandas as pd

from terramap.errors import InvalidConfigError, MalformedRowError, MissingPoseError
from terramap.hmm_grid import GridConfig
from terramap.observation import LabelledScan, SensorPose
from terramap.sim import (
    TrueTerrain,
    TruthCheckpoint,
    TruthEvent,
    TruthLog,
)
from terramap.terrain_map import CellSummary, MapSnapshot
from terramap.volumetrics import ChangeGrid

SCAN_COLUMNS = ["x", "y", "z", "label"]
POSE_COLUMNS = ["scan_index", "timestamp", "tx", "ty", "tz", "qw", "qx", "qy", "qz"]
SNAPSHOT_COLUMNS = ["ix", "iy", "x_center", "y_center", "height", "confidence"]
TIMESERIES_COLUMNS = ["scan_index", "timestamp", "net_m3", "removed_m3", "added_m3"]
CHANGEGRID_COLUMNS = ["ix", "iy", "dh"]

_FLOAT_FMT = "%.9g"


def _fmt(value: float) -> str:
    return _FLOAT_FMT % value


def scan_filename(scan_index: int) -> str:
    return f"{scan_index:06d}.csv"


# -- low-level CSV helpers -------------------------------------------------


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _first_bad_line(path: Path, n_fields: int) -> tuple[int, str]:
    """Locate the first unparseable row for a precise error message."""
    with open(path, newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if line_no == 1 or not row:
                continue
            if len(row) != n_fields:
                return line_no, f"expected {n_fields} fields, got {len(row)}"
            for field in row:
                try:
                    float(field)
                except ValueError:
                    return line_no, f"non-numeric field {field!r}"
    return 0, "unknown parse failure"


def _read_table(path: Path, columns: list[str]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=np.float64)
    except (ValueError, pd.errors.ParserError):
        line_no, detail = _first_bad_line(path, len(columns))
        raise MalformedRowError(path, line_no, detail) from None
    if list(frame.columns) != columns:
        raise MalformedRowError(
            path, 1, f"expected header {','.join(columns)}, got {','.join(frame.columns)}"
        )
    return frame


# -- scans and poses -------------------------------------------------------


def write_scan_csv(path: str | Path, scan: LabelledScan) -> None:
    pts = scan.points
    rows = (
        (_fmt(pts[i, 0]), _fmt(pts[i, 1]), _fmt(pts[i, 2]), int(scan.labels[i]))
        for i in range(pts.shape[0])
    )
    _write_rows(Path(path), SCAN_COLUMNS, rows)


def read_scan_csv(path: str | Path, timestamp: float = 0.0) -> LabelledScan:
    frame = _read_table(Path(path), SCAN_COLUMNS)
    points = frame[["x", "y", "z"]].to_numpy(dtype=np.float64)
    labels = frame["label"].to_numpy()
    if points.shape[0] and not np.all(labels == np.floor(labels)):
        bad = int(np.nonzero(labels != np.floor(labels))[0][0])
        raise MalformedRowError(path, bad + 2, f"label {labels[bad]!r} is not an integer")
    return LabelledScan(
        points=points, labels=labels.astype(np.uint8), timestamp=timestamp
    )


def write_poses_csv(path: str | Path, poses: list[SensorPose]) -> None:
    rows = []
    for p in poses:
        t, q = p.translation, p.rotation
        rows.append(
            (p.scan_index, _fmt(p.timestamp), _fmt(t[0]), _fmt(t[1]), _fmt(t[2]),
             _fmt(q[0]), _fmt(q[1]), _fmt(q[2]), _fmt(q[3]))
        )
    _write_rows(Path(path), POSE_COLUMNS, rows)


def read_poses_csv(path: str | Path) -> dict[int, SensorPose]:
    frame = _read_table(Path(path), POSE_COLUMNS)
    poses = {}
    for row in frame.itertuples(index=False):
        idx = int(row.scan_index)
        poses[idx] = SensorPose(
            translation=np.array([row.tx, row.ty, row.tz]),
            rotation=np.array([row.qw, row.qx, row.qy, row.qz]),
            timestamp=float(row.timestamp),
            scan_index=idx,
        )
    return poses


# -- truth logs ------------------------------------------------------------


def write_truth(dataset_dir: str | Path, truth: TruthLog) -> None:
    root = Path(dataset_dir)
    ck_dir = root / "checkpoints"
    ck_dir.mkdir(parents=True, exist_ok=True)
    checkpoints = []
    for ck in truth.checkpoints:
        rel = f"checkpoints/{ck.at_scan:06d}.npy"
        np.save(root / rel, ck.terrain.heights)
        checkpoints.append(
            {
                "at_scan": ck.at_scan,
                "heightfield": rel,
                "origin": list(ck.terrain.origin),
                "resolution": ck.terrain.resolution,
                "h_min": ck.terrain.h_min,
                "h_max": ck.terrain.h_max,
            }
        )
    doc = {
        "events": [
            {
                "at_scan": e.at_scan,
                "kind": e.kind,
                "footprint": list(e.footprint),
                "dh": e.dh,
                "shape": e.shape,
                "volume_added": e.volume_added,
                "cumulative_net_removed": e.cumulative_net_removed,
            }
            for e in truth.events
        ],
        "checkpoints": checkpoints,
    }
    (root / "truth.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_truth(dataset_dir: str | Path) -> TruthLog:
    root = Path(dataset_dir)
    doc = json.loads((root / "truth.json").read_text())
    log = TruthLog()
    for e in doc["events"]:
        log.events.append(
            TruthEvent(
                at_scan=int(e["at_scan"]),
                kind=e["kind"],
                footprint=tuple(e["footprint"]),
                dh=float(e["dh"]),
                shape=e["shape"],
                volume_added=float(e["volume_added"]),
                cumulative_net_removed=float(e["cumulative_net_removed"]),
            )
        )
    for c in doc["checkpoints"]:
        terrain = TrueTerrain(
            heights=np.load(root / c["heightfield"]),
            origin=tuple(c["origin"]),
            resolution=float(c["resolution"]),
            h_min=float(c["h_min"]),
            h_max=float(c["h_max"]),
        )
        log.checkpoints.append(TruthCheckpoint(at_scan=int(c["at_scan"]), terrain=terrain))
    return log


# -- whole datasets --------------------------------------------------------


def write_dataset(
    out_dir: str | Path,
    scans: list[LabelledScan],
    poses: list[SensorPose],
    truth: TruthLog | None = None,
) -> Path:
    """Write a complete dataset directory; returns its path."""
    root = Path(out_dir)
    scan_dir = root / "scans"
    scan_dir.mkdir(parents=True, exist_ok=True)
    if len(scans) != len(poses):
        raise InvalidConfigError(
            f"{len(scans)} scans but {len(poses)} poses; datasets pair them 1:1"
        )
    for scan, pose in zip(scans, poses):
        write_scan_csv(scan_dir / scan_filename(pose.scan_index), scan)
    write_poses_csv(root / "poses.csv", poses)
    if truth is not None:
        write_truth(root, truth)
    return root


def load_dataset(path: str | Path) -> Iterator[tuple[LabelledScan, SensorPose]]:
    """Stream (scan, pose) pairs in ascending scan_index.

    Fails fast on a missing pose table or unparseable row; a gap in the
    scan numbering only warns, because partial datasets are still
    mappable.
    """
    root = Path(path)
    poses_path = root / "poses.csv"
    if not poses_path.exists():
        raise MissingPoseError(f"{root} has no poses.csv")
    poses = read_poses_csv(poses_path)

    scan_dir = root / "scans"
    files = sorted(scan_dir.glob("*.csv")) if scan_dir.is_dir() else []
    indices = []
    for f in files:
        try:
            indices.append(int(f.stem))
        except ValueError:
            raise MalformedRowError(f, 0, "scan filename is not a scan index")
    order = np.argsort(indices)
    prev = None
    for pos in order:
        idx = indices[pos]
        if prev is not None and idx != prev + 1:
            warnings.warn(
                f"scan index gap: {prev} -> {idx} in {root}", stacklevel=2
            )
        prev = idx
        pose = poses.get(idx)
        if pose is None:
            raise MissingPoseError(f"{files[pos]} has no pose row for scan {idx}")
        yield read_scan_csv(files[pos], timestamp=pose.timestamp), pose


def dataset_scan_count(path: str | Path) -> int:
    scan_dir = Path(path) / "scans"
    return len(list(scan_dir.glob("*.csv"))) if scan_dir.is_dir() else 0


# -- map snapshots ---------------------------------------------------------


def write_snapshot_csv(path: str | Path, snap: MapSnapshot, cfg: GridConfig) -> None:
    delta = cfg.delta
    rows = (
        (
            c.ix,
            c.iy,
            _fmt((c.ix + 0.5) * delta),
            _fmt((c.iy + 0.5) * delta),
            _fmt(c.height),
            _fmt(c.confidence),
        )
        for c in snap.cells
    )
    _write_rows(Path(path), SNAPSHOT_COLUMNS, rows)


def read_snapshot_csv(path: str | Path, scan_index: int | None = None) -> MapSnapshot:
    path = Path(path)
    if scan_index is None:
        try:
            scan_index = int(path.stem.split("_")[-1])
        except ValueError:
            raise InvalidConfigError(
                f"cannot infer scan index from {path.name}; pass scan_index"
            ) from None
    frame = _read_table(path, SNAPSHOT_COLUMNS)
    cells = [
        CellSummary(
            ix=int(row.ix), iy=int(row.iy), height=row.height, confidence=row.confidence
        )
        for row in frame.itertuples(index=False)
    ]
    return MapSnapshot(scan_index=scan_index, cells=cells)


# -- volume exports --------------------------------------------------------


def write_timeseries_csv(path: str | Path, rows: list[tuple[int, float, float, float, float]]) -> None:
    """rows: (scan_index, timestamp, net_m3, removed_m3, added_m3)."""
    _write_rows(
        Path(path),
        TIMESERIES_COLUMNS,
        ((s, _fmt(t), _fmt(n), _fmt(r), _fmt(a)) for s, t, n, r, a in rows),
    )


def read_timeseries_csv(path: str | Path) -> list[tuple[int, float, float, float, float]]:
    frame = _read_table(Path(path), TIMESERIES_COLUMNS)
    return [
        (int(r.scan_index), r.timestamp, r.net_m3, r.removed_m3, r.added_m3)
        for r in frame.itertuples(index=False)
    ]


def write_changegrid_csv(path: str | Path, grid: ChangeGrid) -> None:
    _write_rows(
        Path(path),
        CHANGEGRID_COLUMNS,
        ((ix, iy, _fmt(dh)) for ix, iy, dh in grid.cells),
    )


def read_changegrid_csv(path: str | Path, k1: int = -1, k2: int = -1) -> ChangeGrid:
    frame = _read_table(Path(path), CHANGEGRID_COLUMNS)
    cells = [(int(r.ix), int(r.iy), r.dh) for r in frame.itertuples(index=False)]
    return ChangeGrid(k1=k1, k2=k2, cells=cells)
