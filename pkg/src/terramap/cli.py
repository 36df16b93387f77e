"""Command-line entry point.

Four commands cover the full loop:

    terramap simulate <scenario> --out data/     render a synthetic dataset
    terramap map      --dataset data/ --out run/ map it into snapshots
    terramap volume   --dataset run/  --out vol/ volumes + change grids
    terramap bench    --dataset data/            throughput report

Exit status is 0 on success (warnings included) and nonzero only when an
actual error stopped the command.
"""

from __future__ import annotations

import argparse
import sys
from importlib import resources
from pathlib import Path

from terramap.config import RunConfig, apply_overrides, load_run_config
from terramap.dataset import (
    dataset_scan_count,
    load_dataset,
    read_snapshot_csv,
    write_changegrid_csv,
    write_dataset,
    write_timeseries_csv,
)
from terramap.errors import TerramapError
from terramap.pipeline import bench_run, format_bench_report, read_times, run_mapping
from terramap.sim import load_scenario, run_scenario
from terramap.volumetrics import change_grid, volume_between


def _warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 1


def _build_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    return apply_overrides(
        cfg,
        update_stride=getattr(args, "stride", None),
        window=getattr(args, "window", None),
        snapshot_every=getattr(args, "snapshot_every", None),
        seed=getattr(args, "seed", None),
        baseline=getattr(args, "baseline", None),
        dataset=getattr(args, "dataset", None),
        out=getattr(args, "out", None),
    )


# -- map -------------------------------------------------------------------


def cmd_map(args) -> int:
    cfg = _build_config(args)
    if not cfg.dataset:
        return _fail("map needs a dataset (--dataset or dataset= in the config)")
    if not cfg.out:
        return _fail("map needs an output directory (--out or out= in the config)")
    out = Path(cfg.out)
    if dataset_scan_count(cfg.dataset) == 0:
        _warn(f"{cfg.dataset} contains no scans; writing an empty map export")
    try:
        result = run_mapping(cfg, load_dataset(cfg.dataset), out_dir=out, keep_snapshots=False)
    except TerramapError as exc:
        partial = sorted(p.name for p in out.glob("*")) if out.is_dir() else []
        if partial:
            _warn(f"partial artifacts left in {out}: {', '.join(partial)}")
        return _fail(str(exc))
    for msg in result.warnings:
        _warn(msg)
    m = result.metrics
    print(
        f"mapped {m['scans_processed']}/{m['scans_seen']} scans "
        f"({m['scans_per_sec']:.1f}/s) into {m['map_cells']} cells; "
        f"{len(result.snapshot_times)} snapshots in {out}"
    )
    return 0


# -- volume ----------------------------------------------------------------


def _load_snapshots(root: Path):
    snap_dir = root / "snapshots" if (root / "snapshots").is_dir() else root
    paths = sorted(p for p in snap_dir.glob("*.csv") if p.stem.isdigit())
    snaps = [read_snapshot_csv(p) for p in paths]
    snaps.sort(key=lambda s: s.scan_index)
    times_path = snap_dir / "times.csv"
    times = read_times(times_path) if times_path.exists() else {}
    return snaps, times


def cmd_volume(args) -> int:
    cfg = _build_config(args)
    if not cfg.dataset:
        return _fail("volume needs --dataset pointing at a map output directory")
    if not cfg.out:
        return _fail("volume needs an output directory (--out)")
    root = Path(cfg.dataset)
    if args.config is None and (root / "run_config.txt").exists():
        # inherit delta & friends from the run that made the snapshots
        cfg = apply_overrides(
            load_run_config(root / "run_config.txt"),
            window=args.window,
            baseline=args.baseline,
            dataset=str(root),
            out=args.out,
        )
    snaps, times = _load_snapshots(root)
    if len(snaps) < 2:
        return _fail(f"volume needs at least 2 snapshots, found {len(snaps)} in {root}")
    if not times:
        _warn("no snapshot time table found; timestamps default to 0")

    by_scan = {s.scan_index: s for s in snaps}
    base_scan = cfg.baseline if cfg.baseline in by_scan else snaps[0].scan_index
    if cfg.baseline and cfg.baseline not in by_scan:
        _warn(
            f"no snapshot at baseline scan {cfg.baseline}; "
            f"using {base_scan} (available: {sorted(by_scan)})"
        )
    baseline = by_scan[base_scan]
    delta = cfg.grid.delta
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    zero_common = 0
    for snap in snaps:
        if snap.scan_index < base_scan:
            continue
        report = volume_between(baseline, snap, delta)
        if report.common_cell_count == 0:
            zero_common += 1
        rows.append(
            (
                snap.scan_index,
                times.get(snap.scan_index, 0.0),
                report.net_change,
                report.removed_volume,
                report.added_volume,
            )
        )
    write_timeseries_csv(out / "timeseries.csv", rows)

    grids = 0
    for snap in snaps:
        prev = by_scan.get(snap.scan_index - cfg.window)
        if prev is None:
            continue
        grid = change_grid(prev, snap)
        write_changegrid_csv(out / f"changegrid_{snap.scan_index:06d}.csv", grid)
        grids += 1
    write_changegrid_csv(
        out / "changegrid_final.csv", change_grid(baseline, snaps[-1])
    )

    if zero_common:
        _warn(f"{zero_common} snapshot pair(s) share no common cells")
    print(
        f"volume series over {len(rows)} snapshots (baseline scan {base_scan}), "
        f"{grids} receding-window change grid(s) in {out}"
    )
    return 0


# -- simulate --------------------------------------------------------------


def bundled_scenarios() -> dict[str, Path]:
    base = resources.files("terramap") / "scenarios"
    try:
        return {p.stem: Path(str(p)) for p in base.iterdir() if p.name.endswith(".scenario")}
    except FileNotFoundError:
        return {}


def _resolve_scenario(name: str) -> Path:
    path = Path(name)
    if path.exists():
        return path
    bundled = bundled_scenarios()
    stem = path.stem if path.suffix == ".scenario" else name
    if stem in bundled:
        return bundled[stem]
    raise TerramapError(
        f"no scenario file {name!r}; bundled scenarios: {', '.join(sorted(bundled))}"
    )


def cmd_simulate(args) -> int:
    if not args.out:
        return _fail("simulate needs an output directory (--out)")
    try:
        scenario = load_scenario(_resolve_scenario(args.scenario))
        terrain, events, sensor = scenario.build(seed=args.seed)
        run = run_scenario(terrain, events, sensor, scenario.n_scans)
        write_dataset(args.out, run.scans, run.poses, run.truth)
    except TerramapError as exc:
        return _fail(str(exc))
    print(
        f"simulated {scenario.name!r}: {len(run.scans)} scans, "
        f"{len(run.truth.events)} events, seed {sensor.seed} -> {args.out}"
    )
    return 0


# -- bench -----------------------------------------------------------------


def cmd_bench(args) -> int:
    cfg = _build_config(args)
    if not cfg.dataset:
        return _fail("bench needs --dataset")
    try:
        pairs = list(load_dataset(cfg.dataset))
    except TerramapError as exc:
        return _fail(str(exc))
    if not pairs:
        _warn(f"{cfg.dataset} contains no scans; reporting zeros")
    report = bench_run(cfg, pairs)
    text = format_bench_report(report)
    print(text, end="")
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.txt").write_text(text)
    return 0


# -- argument wiring -------------------------------------------------------


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="key=value config file")
    sub.add_argument("--dataset", help="dataset / snapshot directory")
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--stride", type=int, help="process every Nth scan")
    sub.add_argument("--seed", type=int, help="random seed override")
    sub.add_argument("--window", type=int, help="receding-window length in scans")
    sub.add_argument("--baseline", type=int, help="baseline snapshot scan index")
    sub.add_argument(
        "--snapshot-every", dest="snapshot_every", type=int, help="snapshot cadence in scans"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="terramap",
        description="Probabilistic terrain mapping from labelled LiDAR scans.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_map = sub.add_parser("map", help="run a dataset through the mapping pipeline")
    _add_common(p_map)
    p_map.set_defaults(func=cmd_map)

    p_vol = sub.add_parser("volume", help="volume timeseries + change grids from snapshots")
    _add_common(p_vol)
    p_vol.set_defaults(func=cmd_volume)

    p_sim = sub.add_parser("simulate", help="render a synthetic scenario to a dataset")
    p_sim.add_argument("scenario", help="scenario file path or bundled scenario name")
    _add_common(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_bench = sub.add_parser("bench", help="throughput report over a dataset")
    _add_common(p_bench)
    p_bench.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TerramapError as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
