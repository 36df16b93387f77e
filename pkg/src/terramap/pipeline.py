"""End-to-end mapping runs: dataset in, snapshots and metrics out.

This is the orchestration layer under the CLI — a single-writer loop
that strides through a scan stream, folds each processed scan into the
global map, and checkpoints snapshots on a fixed scan-index cadence.
Kept separate from the CLI so tests and benchmarks can drive it without
a subprocess.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numba

from terramap.config import RunConfig, config_echo
from terramap.dataset import (
    write_snapshot_csv,
)
from terramap.observation import process_scan_arrays
from terramap.terrain_map import GlobalMap, MapSnapshot, apply_observations, init_map, snapshot

STAGE_KEYS = ("transform", "voxelize", "raycast", "reduce", "update")


@dataclass
class MapRunResult:
    gmap: GlobalMap
    snapshots: list[MapSnapshot] = field(default_factory=list)
    snapshot_times: list[tuple[int, float]] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)


def _snapshot_path(out_dir: Path, scan_index: int) -> Path:
    return out_dir / "snapshots" / f"{scan_index:06d}.csv"


def run_mapping(
    cfg: RunConfig,
    stream,
    out_dir: str | Path | None = None,
    keep_snapshots: bool = True,
) -> MapRunResult:
    """Map a scan stream; optionally write artifacts under `out_dir`.

    Scans whose index is not a multiple of update_stride are skipped
    (deterministic index-based striding, robust to gaps).  After each
    applied scan whose index is a multiple of snapshot_every, a snapshot
    is taken — and written to `out_dir/snapshots/` when an output
    directory is given, along with the final map export, a metrics file,
    and an echo of the effective configuration.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "snapshots").mkdir(parents=True, exist_ok=True)

    gmap = init_map(cfg.grid)
    result = MapRunResult(gmap=gmap)
    timings: dict[str, float] = {}
    totals = {
        "cells_created": 0,
        "cells_updated": 0,
        "reported_changed": 0,
        "skipped_out_of_range": 0,
        "duplicates_dropped": 0,
    }
    scans_seen = 0
    scans_processed = 0
    points_seen = 0
    t_start = time.perf_counter()
    for scan, pose in stream:
        scans_seen += 1
        if pose.scan_index % cfg.update_stride != 0:
            continue
        cells, heights, stats = process_scan_arrays(
            scan, pose, cfg.grid, cfg.exclusion_boxes, timings
        )
        t0 = time.perf_counter()
        report = apply_observations(gmap, (cells, heights), pose.scan_index)
        timings["update"] = timings.get("update", 0.0) + time.perf_counter() - t0
        totals["cells_created"] += report.created
        totals["cells_updated"] += report.updated
        totals["reported_changed"] += report.reported_changed
        totals["skipped_out_of_range"] += report.skipped_out_of_range
        totals["duplicates_dropped"] += report.duplicates_dropped
        scans_processed += 1
        points_seen += stats.n_points
        if pose.scan_index % cfg.snapshot_every == 0:
            snap = snapshot(gmap)
            result.snapshot_times.append((pose.scan_index, pose.timestamp))
            if keep_snapshots:
                result.snapshots.append(snap)
            if out is not None:
                write_snapshot_csv(_snapshot_path(out, pose.scan_index), snap, cfg.grid)
    wall = time.perf_counter() - t_start

    if scans_seen == 0:
        result.warnings.append("dataset contains no scans; map export is empty")

    metrics = {
        "n_states": gmap.transition.n,
        "delta_off": gmap.transition.delta_off,
        "scans_seen": scans_seen,
        "scans_processed": scans_processed,
        "points_seen": points_seen,
        "map_cells": len(gmap),
        "wall_time_s": wall,
        "scans_per_sec": scans_processed / wall if wall > 0 else 0.0,
        **totals,
    }
    for key in STAGE_KEYS:
        metrics[f"time_{key}_s"] = timings.get(key, 0.0)
    result.metrics = metrics

    if out is not None:
        write_snapshot_csv(out / "map_final.csv", snapshot(gmap), cfg.grid)
        _write_times(out / "snapshots" / "times.csv", result.snapshot_times)
        (out / "metrics.txt").write_text(format_metrics(metrics))
        (out / "run_config.txt").write_text(config_echo(cfg))
    return result


def _write_times(path: Path, rows: list[tuple[int, float]]) -> None:
    lines = ["scan_index,timestamp"]
    lines += [f"{s},{t:.9g}" for s, t in rows]
    path.write_text("\n".join(lines) + "\n")


def read_times(path: Path) -> dict[int, float]:
    times = {}
    for line in path.read_text().splitlines()[1:]:
        s, t = line.split(",")
        times[int(s)] = float(t)
    return times


def format_metrics(metrics: dict) -> str:
    lines = []
    for key, value in metrics.items():
        if isinstance(value, float):
            lines.append(f"{key} = {value:.9g}")
        else:
            lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def bench_run(cfg: RunConfig, pairs: list, min_scans: int = 100) -> dict:
    """Throughput measurement over at least `min_scans` scan updates.

    The dataset is cycled (with reindexed scan numbers) until the floor
    is reached, then mapped twice end to end: once pinned to a single
    compute thread and once with every available thread, sharing one
    warm-up pass so compilation never lands inside a timed region.
    """
    report: dict = {"scans": 0, "points_per_scan": 0.0}
    if not pairs:
        report.update(
            threads_single=1,
            threads_parallel=numba.get_num_threads(),
            scans_per_sec_single=0.0,
            scans_per_sec_parallel=0.0,
            stage_seconds={k: 0.0 for k in STAGE_KEYS},
            stage_coverage=0.0,
        )
        return report

    stretched = []
    k = 0
    while len(stretched) < min_scans:
        for scan, pose in pairs:
            stretched.append((scan, replace(pose, scan_index=k)))
            k += 1
    bench_cfg = replace(cfg, update_stride=1, snapshot_every=10 * len(stretched))

    # warm-up: compile/load every kernel outside the timed runs
    run_mapping(bench_cfg, stretched[:2], keep_snapshots=False)

    max_threads = numba.get_num_threads()
    results = {}
    for label, threads in (("single", 1), ("parallel", max_threads)):
        numba.set_num_threads(threads)
        try:
            results[label] = run_mapping(bench_cfg, stretched, keep_snapshots=False)
        finally:
            numba.set_num_threads(max_threads)

    m = results["parallel"].metrics
    stage_seconds = {k: m[f"time_{k}_s"] for k in STAGE_KEYS}
    wall = m["wall_time_s"]
    report.update(
        scans=len(stretched),
        points_per_scan=m["points_seen"] / len(stretched),
        threads_single=1,
        threads_parallel=max_threads,
        scans_per_sec_single=results["single"].metrics["scans_per_sec"],
        scans_per_sec_parallel=m["scans_per_sec"],
        stage_seconds=stage_seconds,
        stage_coverage=sum(stage_seconds.values()) / wall if wall > 0 else 0.0,
    )
    return report


def format_bench_report(report: dict) -> str:
    lines = [
        f"scans = {report['scans']}",
        f"points_per_scan = {report['points_per_scan']:.9g}",
        f"threads_single = {report['threads_single']}",
        f"threads_parallel = {report['threads_parallel']}",
        f"scans_per_sec_single = {report['scans_per_sec_single']:.9g}",
        f"scans_per_sec_parallel = {report['scans_per_sec_parallel']:.9g}",
    ]
    total = sum(report["stage_seconds"].values())
    for key in STAGE_KEYS:
        sec = report["stage_seconds"][key]
        share = sec / total if total > 0 else 0.0
        lines.append(f"time_{key}_s = {sec:.9g}  # {share:.1%} of staged time")
    lines.append(f"stage_coverage = {report['stage_coverage']:.9g}")
    return "\n".join(lines) + "\n"
