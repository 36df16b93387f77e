"""Volume change between map snapshots.

All comparisons run over the cells present in *both* snapshots: a cell
seen at only one endpoint says nothing about change, so it is excluded
and counted.  Per-cell change is (earlier height − later height)·Δ², so
positive net change means material was removed — the curve climbs while
digging.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from terramap.terrain_map import MapSnapshot


@dataclass(frozen=True)
class VolumeReport:
    """Net and per-direction volume change between two snapshots."""

    k1: int
    k2: int
    common_cell_count: int
    removed_volume: float
    added_volume: float
    net_change: float
    only_in_first: int = 0
    only_in_second: int = 0


@dataclass(frozen=True)
class ChangeGrid:
    """Common cells whose reported height changed between two snapshots."""

    k1: int
    k2: int
    cells: list[tuple[int, int, float]]  # (ix, iy, dh = h_k2 - h_k1)


def cell_volume_change(h_k1: float, h_k2: float, delta: float) -> float:
    """Volume difference one cell contributes: (h_k1 − h_k2)·Δ²."""
    return (h_k1 - h_k2) * delta * delta


def _height_lookup(snap: MapSnapshot) -> dict[tuple[int, int], float]:
    return {(c.ix, c.iy): c.height for c in snap.cells}


def volume_between(s1: MapSnapshot, s2: MapSnapshot, delta: float) -> VolumeReport:
    """Signed volume change over the cells common to both snapshots.

    Removed and added components are accumulated separately (both
    non-negative); net_change = removed − added.
    """
    h1 = _height_lookup(s1)
    h2 = _height_lookup(s2)
    # Sorted so the float accumulation order (hence the exported bytes)
    # never depends on hash-iteration order.
    common = sorted(h1.keys() & h2.keys())
    cell_area = delta * delta
    removed = 0.0
    added = 0.0
    for key in common:
        diff = h1[key] - h2[key]
        if diff > 0.0:
            removed += diff
        else:
            added -= diff
    removed *= cell_area
    added *= cell_area
    return VolumeReport(
        k1=s1.scan_index,
        k2=s2.scan_index,
        common_cell_count=len(common),
        removed_volume=removed,
        added_volume=added,
        net_change=removed - added,
        only_in_first=len(h1) - len(common),
        only_in_second=len(h2) - len(common),
    )


def change_grid(s1: MapSnapshot, s2: MapSnapshot) -> ChangeGrid:
    """Per-cell height deltas (later − earlier) over common cells.

    Cells with zero change are omitted; output is sorted by (ix, iy).
    """
    h1 = _height_lookup(s1)
    h2 = _height_lookup(s2)
    cells = []
    for key in sorted(h1.keys() & h2.keys()):
        dh = h2[key] - h1[key]
        if dh != 0.0:
            cells.append((key[0], key[1], dh))
    return ChangeGrid(k1=s1.scan_index, k2=s2.scan_index, cells=cells)


def volume_timeseries(
    snapshots: list[MapSnapshot], delta: float, baseline: int
) -> list[tuple[int, float]]:
    """Cumulative net volume change of each snapshot against a baseline.

    `baseline` indexes into `snapshots`; one (scan_index, net m³) entry
    is produced for the baseline itself (always 0) and every later
    snapshot.
    """
    if not 0 <= baseline < len(snapshots):
        raise IndexError(
            f"baseline {baseline} out of range for {len(snapshots)} snapshots"
        )
    indices = [s.scan_index for s in snapshots]
    if indices != sorted(indices):
        raise ValueError("snapshots must be ordered by scan_index")
    base = snapshots[baseline]
    out = []
    for snap in snapshots[baseline:]:
        out.append((snap.scan_index, volume_between(base, snap, delta).net_change))
    return out


def volume_report_series(
    snapshots: list[MapSnapshot], delta: float, baseline: int
) -> list[VolumeReport]:
    """Full VolumeReports against the baseline (superset of the
    timeseries — used for export, which also wants removed/added)."""
    if not 0 <= baseline < len(snapshots):
        raise IndexError(
            f"baseline {baseline} out of range for {len(snapshots)} snapshots"
        )
    base = snapshots[baseline]
    return [volume_between(base, snap, delta) for snap in snapshots[baseline:]]
