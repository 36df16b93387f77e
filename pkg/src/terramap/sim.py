"""Synthetic scenes with known ground truth.

Procedural heightfield terrain, a scripted sequence of excavation and
spillage events with closed-form true volumes, and a virtual spinning
LiDAR that range-marches the heightfield, optionally corrupting beams
with Gaussian range noise and airborne-dust returns.  Dust points are
labelled terrain on purpose — the mapping side is supposed to reject
them from geometry alone, and the simulator exists to exercise exactly
that.

Determinism: every random draw derives from (sensor.seed, scan_index)
through a SeedSequence spawn key, so any scan can be re-rendered on its
own and whole datasets are byte-reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from terramap import kernels
from terramap.errors import InvalidConfigError, RangeViolationError
from terramap.hmm_grid import GridConfig
from terramap.observation import TERRAIN, LabelledScan, SensorPose


@dataclass
class TrueTerrain:
    """Node-centred heightfield ground truth.

    heights[i, j] is the surface height at (origin_x + i*resolution,
    origin_y + j*resolution); between nodes the surface interpolates
    bilinearly.  Heights must stay inside [h_min, h_max] so rendered
    scenes remain representable by the mapping grid.
    """

    heights: np.ndarray
    origin: tuple[float, float]
    resolution: float
    h_min: float = 0.0
    h_max: float = 20.0

    def __post_init__(self):
        self.heights = np.asarray(self.heights, dtype=np.float64)
        if self.heights.ndim != 2 or min(self.heights.shape) < 2:
            raise InvalidConfigError("terrain heightfield must be at least 2x2")
        if self.resolution <= 0:
            raise InvalidConfigError(f"terrain resolution must be > 0, got {self.resolution}")
        if self.heights.min() < self.h_min or self.heights.max() > self.h_max:
            raise RangeViolationError(
                f"terrain heights [{self.heights.min()}, {self.heights.max()}] "
                f"exceed the [{self.h_min}, {self.h_max}] band"
            )

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(x_min, x_max, y_min, y_max) covered by the node grid."""
        nx, ny = self.heights.shape
        return (
            self.origin[0],
            self.origin[0] + (nx - 1) * self.resolution,
            self.origin[1],
            self.origin[1] + (ny - 1) * self.resolution,
        )

    def copy(self) -> TrueTerrain:
        return TrueTerrain(
            heights=self.heights.copy(),
            origin=self.origin,
            resolution=self.resolution,
            h_min=self.h_min,
            h_max=self.h_max,
        )

    def height_at(self, x: float, y: float) -> float:
        """Bilinear surface height at (x, y); NaN outside the field."""
        h = kernels._ground_height(
            self.heights,
            self.origin[0],
            self.origin[1],
            1.0 / self.resolution,
            float(x),
            float(y),
        )
        return float(h) if math.isfinite(h) else float("nan")

    def node_xy(self) -> tuple[np.ndarray, np.ndarray]:
        nx, ny = self.heights.shape
        xs = self.origin[0] + self.resolution * np.arange(nx)
        ys = self.origin[1] + self.resolution * np.arange(ny)
        return xs, ys


@dataclass(frozen=True)
class TerrainSpec:
    """Parameters for one procedural terrain family.

    kind "flat": constant base_height.
    kind "bench_face": base_height floor that ramps up at face_slope_deg
        from x = face_x toward crest_height.
    kind "rough": base_height plus smoothed Gaussian noise of the given
        amplitude (std-dev, metres) and correlation length.
    """

    kind: str
    size: tuple[float, float]
    resolution: float
    base_height: float = 0.0
    origin: tuple[float, float] = (0.0, 0.0)
    crest_height: float = 15.0
    face_x: float = 0.0
    face_slope_deg: float = 70.0
    amplitude: float = 0.5
    corr_length: float = 2.0
    h_min: float = 0.0
    h_max: float = 20.0

    def __post_init__(self):
        if self.kind not in ("flat", "bench_face", "rough"):
            raise InvalidConfigError(f"unknown terrain kind {self.kind!r}")
        if self.size[0] <= 0 or self.size[1] <= 0:
            raise InvalidConfigError(f"terrain size must be positive, got {self.size}")
        if self.resolution <= 0:
            raise InvalidConfigError("terrain resolution must be > 0")


def generate_terrain(spec: TerrainSpec, seed: int = 0) -> TrueTerrain:
    """Build the heightfield for `spec`; identical output for one seed."""
    nx = int(round(spec.size[0] / spec.resolution)) + 1
    ny = int(round(spec.size[1] / spec.resolution)) + 1
    if spec.kind == "flat":
        heights = np.full((nx, ny), spec.base_height)
    elif spec.kind == "bench_face":
        xs = spec.origin[0] + spec.resolution * np.arange(nx)
        rise = np.tan(math.radians(spec.face_slope_deg)) * (xs - spec.face_x)
        profile = np.clip(spec.base_height + np.maximum(rise, 0.0), None, spec.crest_height)
        heights = np.repeat(profile[:, None], ny, axis=1)
    else:  # rough
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        noise = rng.standard_normal((nx, ny))
        smooth = ndimage.gaussian_filter(noise, sigma=spec.corr_length / spec.resolution)
        sd = smooth.std()
        if sd > 0:
            smooth = smooth / sd * spec.amplitude
        heights = spec.base_height + smooth
        heights = np.clip(heights, spec.h_min, spec.h_max)
    return TrueTerrain(
        heights=heights,
        origin=spec.origin,
        resolution=spec.resolution,
        h_min=spec.h_min,
        h_max=spec.h_max,
    )


@dataclass(frozen=True)
class Event:
    """One scripted terrain edit, applied before rendering `at_scan`."""

    at_scan: int
    kind: str  # "excavate" | "spill"
    footprint: tuple[float, float, float, float]  # x0, y0, x1, y1
    dh: float  # signed height change; <= 0 for excavate, >= 0 for spill
    shape: str = "flat"  # "flat" | "ramp" (linear 0 -> dh along +x)

    def __post_init__(self):
        if self.kind not in ("excavate", "spill"):
            raise InvalidConfigError(f"unknown event kind {self.kind!r}")
        if self.shape not in ("flat", "ramp"):
            raise InvalidConfigError(f"unknown event shape {self.shape!r}")
        x0, y0, x1, y1 = self.footprint
        if x1 < x0 or y1 < y0:
            raise InvalidConfigError(f"event footprint inverted: {self.footprint}")
        if self.kind == "excavate" and self.dh > 0:
            raise InvalidConfigError("excavate events need dh <= 0")
        if self.kind == "spill" and self.dh < 0:
            raise InvalidConfigError("spill events need dh >= 0")

    @property
    def area(self) -> float:
        x0, y0, x1, y1 = self.footprint
        return (x1 - x0) * (y1 - y0)


def event_volume_added(event: Event) -> float:
    """Signed volume the event adds to the terrain (closed form).

    Negative for excavations.  A ramp profile averages to half the full
    height change over the footprint.
    """
    factor = 1.0 if event.shape == "flat" else 0.5
    return event.dh * event.area * factor


def apply_event(terrain: TrueTerrain, event: Event) -> TrueTerrain:
    """Terrain after one event; the input is left untouched."""
    x0, y0, x1, y1 = event.footprint
    ex0, ex1, ey0, ey1 = terrain.extent
    if x0 < ex0 or y0 < ey0 or x1 > ex1 or y1 > ey1:
        raise InvalidConfigError(
            f"event footprint {event.footprint} outside terrain extent "
            f"({ex0}, {ex1}, {ey0}, {ey1})"
        )
    out = terrain.copy()
    if event.area == 0.0 or event.dh == 0.0:
        return out
    xs, ys = terrain.node_xy()
    # Every node inside the closed footprint moves.  With footprint edges
    # on node positions the bilinear taper to unmoved neighbours lies
    # entirely outside the footprint, so the excavated solid contains the
    # full nominal dh * area prism.
    mx = (xs >= x0) & (xs <= x1)
    my = (ys >= y0) & (ys <= y1)
    if event.shape == "flat":
        patch = event.dh
    else:
        patch = event.dh * ((xs[mx] - x0) / (x1 - x0))[:, None]
    out.heights[np.ix_(mx, my)] += patch
    lo, hi = out.heights.min(), out.heights.max()
    if lo < terrain.h_min or hi > terrain.h_max:
        raise RangeViolationError(
            f"event at scan {event.at_scan} pushes heights to [{lo}, {hi}], "
            f"outside [{terrain.h_min}, {terrain.h_max}]"
        )
    return out


def validate_script(events: list[Event]):
    for a, b in zip(events, events[1:]):
        if b.at_scan < a.at_scan:
            raise InvalidConfigError(
                f"event script out of order: scan {b.at_scan} after {a.at_scan}"
            )


@dataclass
class VirtualSensor:
    """Spinning-LiDAR stand-in plus its trajectory and noise model.

    Beams are ordered azimuth-major: beam b = azimuth_index *
    len(elevation_angles) + elevation_index.  `azimuth_span` < 2π gives
    a sensor with a limited horizontal field of view (combined with a
    yaw-swinging trajectory this reproduces occlusion lag).
    """

    poses: list[SensorPose]
    azimuth_count: int
    elevation_angles: np.ndarray
    range_noise_sigma: float = 0.0
    dust_rate: float = 0.0
    max_range: float = 100.0
    march_step: float = 0.0625  # grid delta / 4 for the stock 0.25 m grid
    refine_iters: int = 1
    azimuth_span: float = 2.0 * math.pi
    seed: int = 0

    def __post_init__(self):
        self.elevation_angles = np.asarray(self.elevation_angles, dtype=np.float64)
        if not self.poses:
            raise InvalidConfigError("sensor needs at least one pose")
        if self.azimuth_count < 1 or self.elevation_angles.size < 1:
            raise InvalidConfigError("sensor needs at least one azimuth and elevation")
        if not 0.0 <= self.dust_rate < 1.0:
            raise InvalidConfigError(f"dust_rate must be in [0, 1), got {self.dust_rate}")
        if self.range_noise_sigma < 0:
            raise InvalidConfigError("range_noise_sigma must be >= 0")
        if self.max_range <= 0 or self.march_step <= 0:
            raise InvalidConfigError("max_range and march_step must be > 0")
        if self.refine_iters < 0:
            raise InvalidConfigError("refine_iters must be >= 0")
        if not 0.0 < self.azimuth_span <= 2.0 * math.pi + 1e-12:
            raise InvalidConfigError("azimuth_span must be in (0, 2*pi]")

    @property
    def beams_per_scan(self) -> int:
        return self.azimuth_count * self.elevation_angles.size

    def beam_directions(self) -> np.ndarray:
        """Unit direction of every beam in the sensor frame."""
        full = abs(self.azimuth_span - 2.0 * math.pi) < 1e-12
        if full:
            az = 2.0 * math.pi * np.arange(self.azimuth_count) / self.azimuth_count
        else:
            az = -0.5 * self.azimuth_span + self.azimuth_span * (
                (np.arange(self.azimuth_count) + 0.5) / self.azimuth_count
            )
        el = self.elevation_angles
        ca, sa = np.cos(az), np.sin(az)
        ce, se = np.cos(el), np.sin(el)
        dirs = np.empty((self.azimuth_count, el.size, 3))
        dirs[:, :, 0] = ca[:, None] * ce[None, :]
        dirs[:, :, 1] = sa[:, None] * ce[None, :]
        dirs[:, :, 2] = se[None, :]
        return dirs.reshape(-1, 3)


def render_scan(
    terrain: TrueTerrain, sensor: VirtualSensor, scan_index: int
) -> tuple[LabelledScan, SensorPose]:
    """One virtual LiDAR sweep against the current terrain.

    Beams that never reach the surface within max_range emit nothing.
    A dust_rate fraction of the surviving beams replace their terrain
    return with a point placed uniformly along the beam strictly before
    the terrain hit, still labelled terrain.
    """
    if not 0 <= scan_index < len(sensor.poses):
        raise IndexError(
            f"scan_index {scan_index} outside trajectory of {len(sensor.poses)} poses"
        )
    pose = sensor.poses[scan_index]
    dirs_s = sensor.beam_directions()
    r = pose.rotation_matrix()
    dirs_m = dirs_s @ r.T
    n = dirs_m.shape[0]

    t_hit = np.empty(n, dtype=np.float64)
    hit = np.empty(n, dtype=np.int64)
    kernels.march_heightfield_rays(
        np.ascontiguousarray(pose.translation),
        np.ascontiguousarray(dirs_m),
        terrain.heights,
        terrain.origin[0],
        terrain.origin[1],
        1.0 / terrain.resolution,
        sensor.max_range,
        sensor.march_step,
        sensor.refine_iters,
        t_hit,
        hit,
    )

    rng = np.random.default_rng(np.random.SeedSequence(sensor.seed, spawn_key=(scan_index,)))
    noise = rng.standard_normal(n)
    dust_pick = rng.random(n)
    dust_frac = rng.random(n)

    mask = hit == 1
    t_final = t_hit.copy()
    if sensor.range_noise_sigma > 0:
        t_final = t_final + noise * sensor.range_noise_sigma
        np.clip(t_final, 1e-9, None, out=t_final)
    dusty = mask & (dust_pick < sensor.dust_rate)
    t_final[dusty] = dust_frac[dusty] * t_hit[dusty]

    points = t_final[mask, None] * dirs_s[mask]
    labels = np.full(points.shape[0], TERRAIN, dtype=np.uint8)
    return LabelledScan(points=points, labels=labels, timestamp=pose.timestamp), pose


# -- trajectories ----------------------------------------------------------


def _yaw_pose(x, y, z, yaw, timestamp, scan_index) -> SensorPose:
    return SensorPose(
        translation=np.array([x, y, z]),
        rotation=np.array([math.cos(yaw / 2), 0.0, 0.0, math.sin(yaw / 2)]),
        timestamp=timestamp,
        scan_index=scan_index,
    )


def orbit_trajectory(
    center: tuple[float, float],
    radius: float,
    height: float,
    n_scans: int,
    scans_per_rev: int,
    rate_hz: float = 10.0,
) -> list[SensorPose]:
    """Circular path around `center` at constant height, yaw tracking
    the tangent so a limited-FoV sensor keeps looking inward."""
    poses = []
    for k in range(n_scans):
        theta = 2.0 * math.pi * (k % scans_per_rev) / scans_per_rev
        x = center[0] + radius * math.cos(theta)
        y = center[1] + radius * math.sin(theta)
        yaw = theta + math.pi  # face the centre
        poses.append(_yaw_pose(x, y, height, yaw, k / rate_hz, k))
    return poses


def static_trajectory(
    position: tuple[float, float, float],
    n_scans: int,
    rate_hz: float = 10.0,
    yaw: float = 0.0,
) -> list[SensorPose]:
    x, y, z = position
    return [_yaw_pose(x, y, z, yaw, k / rate_hz, k) for k in range(n_scans)]


def swing_trajectory(
    position: tuple[float, float, float],
    yaw_center: float,
    yaw_amplitude: float,
    period_scans: int,
    n_scans: int,
    rate_hz: float = 10.0,
) -> list[SensorPose]:
    """Stationary sensor whose yaw oscillates sinusoidally — with a
    partial azimuth span this hides parts of the scene for stretches of
    time, reproducing the delayed observation of fresh changes."""
    if period_scans < 1:
        raise InvalidConfigError("swing period must be >= 1 scan")
    x, y, z = position
    poses = []
    for k in range(n_scans):
        yaw = yaw_center + yaw_amplitude * math.sin(2.0 * math.pi * k / period_scans)
        poses.append(_yaw_pose(x, y, z, yaw, k / rate_hz, k))
    return poses


# -- scenarios -------------------------------------------------------------


@dataclass
class TruthCheckpoint:
    at_scan: int
    terrain: TrueTerrain


@dataclass
class TruthEvent:
    at_scan: int
    kind: str
    footprint: tuple[float, float, float, float]
    dh: float
    shape: str
    volume_added: float
    cumulative_net_removed: float


@dataclass
class TruthLog:
    """Ground truth for one scenario run."""

    events: list[TruthEvent] = field(default_factory=list)
    checkpoints: list[TruthCheckpoint] = field(default_factory=list)

    @property
    def net_removed_total(self) -> float:
        return self.events[-1].cumulative_net_removed if self.events else 0.0


@dataclass
class ScenarioRun:
    scans: list[LabelledScan]
    poses: list[SensorPose]
    truth: TruthLog


def script_truth(terrain: TrueTerrain, script: list[Event]) -> TruthLog:
    """Apply the script off-line: per-event volumes plus post-event
    terrain checkpoints."""
    validate_script(script)
    log = TruthLog()
    current = terrain
    net_removed = 0.0
    for ev in script:
        current = apply_event(current, ev)
        added = event_volume_added(ev)
        net_removed -= added
        log.events.append(
            TruthEvent(
                at_scan=ev.at_scan,
                kind=ev.kind,
                footprint=ev.footprint,
                dh=ev.dh,
                shape=ev.shape,
                volume_added=added,
                cumulative_net_removed=net_removed,
            )
        )
        log.checkpoints.append(TruthCheckpoint(at_scan=ev.at_scan, terrain=current))
    return log


def iter_scenario(
    terrain: TrueTerrain, script: list[Event], sensor: VirtualSensor, n_scans: int
):
    """Yield (scan, pose) for each scan index, applying events on cue.

    An event scheduled at scan k edits the terrain before scan k is
    rendered.
    """
    validate_script(script)
    if n_scans > len(sensor.poses):
        raise InvalidConfigError(
            f"trajectory has {len(sensor.poses)} poses but {n_scans} scans requested"
        )
    current = terrain
    pending = list(script)
    for k in range(n_scans):
        while pending and pending[0].at_scan <= k:
            current = apply_event(current, pending.pop(0))
        yield render_scan(current, sensor, k)


def run_scenario(
    terrain: TrueTerrain, script: list[Event], sensor: VirtualSensor, n_scans: int
) -> ScenarioRun:
    """Render the whole scenario into memory, with its truth log."""
    truth = script_truth(terrain, script)
    scans = []
    poses = []
    for scan, pose in iter_scenario(terrain, script, sensor, n_scans):
        scans.append(scan)
        poses.append(pose)
    return ScenarioRun(scans=scans, poses=poses, truth=truth)


# -- scenario files --------------------------------------------------------


@dataclass
class Scenario:
    """Declarative scenario description (parsed from a JSON file)."""

    name: str
    seed: int
    n_scans: int
    grid: GridConfig
    terrain: TerrainSpec
    events: list[Event]
    sensor_params: dict
    trajectory: dict

    def build(self, seed: int | None = None):
        """Instantiate (terrain, script, sensor) ready for rendering."""
        seed = self.seed if seed is None else seed
        if self.terrain.resolution > self.grid.delta / 2:
            raise InvalidConfigError(
                "terrain.resolution must be at most half the grid delta "
                f"({self.terrain.resolution} > {self.grid.delta / 2})"
            )
        traj = dict(self.trajectory)
        kind = traj.pop("kind")
        if kind == "orbit":
            poses = orbit_trajectory(n_scans=self.n_scans, **traj)
        elif kind == "static":
            poses = static_trajectory(n_scans=self.n_scans, **traj)
        elif kind == "swing":
            poses = swing_trajectory(n_scans=self.n_scans, **traj)
        else:
            raise InvalidConfigError(f"unknown trajectory kind {kind!r}")
        params = dict(self.sensor_params)
        el = np.radians(
            np.linspace(
                params.pop("elevation_min_deg"),
                params.pop("elevation_max_deg"),
                params.pop("elevation_count"),
            )
        )
        if "azimuth_span_deg" in params:
            params["azimuth_span"] = math.radians(params.pop("azimuth_span_deg"))
        sensor = VirtualSensor(
            poses=poses,
            elevation_angles=el,
            # rays march at the terrain's own resolution so the hit
            # tolerance tracks the finest surface feature
            march_step=self.terrain.resolution,
            seed=seed,
            **params,
        )
        return generate_terrain(self.terrain, seed=seed), self.events, sensor

    def with_overrides(self, **sensor_overrides) -> Scenario:
        params = dict(self.sensor_params)
        params.update(sensor_overrides)
        return replace(self, sensor_params=params)


def _require(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise InvalidConfigError(f"scenario is missing required field {where}{key!r}")
    return mapping[key]


def load_scenario(path: str | Path) -> Scenario:
    """Parse and validate a scenario file, naming any offending field."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"{path}: not valid JSON ({exc})") from exc

    grid_raw = dict(raw.get("grid", {}))
    try:
        grid = GridConfig(**grid_raw)
    except (TypeError, InvalidConfigError) as exc:
        raise InvalidConfigError(f"{path}: bad grid section: {exc}") from exc

    terrain_raw = dict(_require(raw, "terrain", ""))
    terrain_raw.setdefault("h_min", grid.h_min)
    terrain_raw.setdefault("h_max", grid.h_max)
    for key in ("size", "origin"):
        if key in terrain_raw and isinstance(terrain_raw[key], list):
            terrain_raw[key] = tuple(terrain_raw[key])
    try:
        terrain = TerrainSpec(**terrain_raw)
    except (TypeError, InvalidConfigError) as exc:
        raise InvalidConfigError(f"{path}: bad terrain section: {exc}") from exc

    events = []
    for i, ev_raw in enumerate(raw.get("events", [])):
        ev_raw = dict(ev_raw)
        if "footprint" in ev_raw and isinstance(ev_raw["footprint"], list):
            ev_raw["footprint"] = tuple(ev_raw["footprint"])
        try:
            events.append(Event(**ev_raw))
        except (TypeError, InvalidConfigError) as exc:
            raise InvalidConfigError(f"{path}: bad events[{i}]: {exc}") from exc

    scenario = Scenario(
        name=str(raw.get("name", path.stem)),
        seed=int(raw.get("seed", 0)),
        n_scans=int(_require(raw, "n_scans", "")),
        grid=grid,
        terrain=terrain,
        events=events,
        sensor_params=dict(_require(raw, "sensor", "")),
        trajectory=dict(_require(raw, "trajectory", "")),
    )
    if scenario.n_scans < 1:
        raise InvalidConfigError(f"{path}: n_scans must be >= 1")
    # Fail fast on inconsistent pieces (footprints outside the terrain,
    # missing sensor fields, ...) rather than mid-render.
    try:
        scenario.build()
        script_truth(generate_terrain(terrain, seed=scenario.seed), events)
    except (TypeError, KeyError) as exc:
        raise InvalidConfigError(f"{path}: bad sensor/trajectory section: {exc}") from exc
    return scenario
