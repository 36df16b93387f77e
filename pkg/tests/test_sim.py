"""Unit tests for the synthetic-scene generator."""

from __future__ import annotations

import json
import math

import numpy as np
import pytest

from terramap.errors import InvalidConfigError, RangeViolationError
from terramap.observation import TERRAIN
from terramap.sim import (
    Event,
    TerrainSpec,
    TrueTerrain,
    VirtualSensor,
    apply_event,
    event_volume_added,
    generate_terrain,
    iter_scenario,
    load_scenario,
    orbit_trajectory,
    render_scan,
    run_scenario,
    script_truth,
    static_trajectory,
    swing_trajectory,
)


def flat_terrain(size=40.0, res=0.125, z=2.0):
    return generate_terrain(
        TerrainSpec(kind="flat", size=(size, size), resolution=res, base_height=z)
    )


def downward_sensor(poses, *, az=90, el_lo=-84.0, el_hi=-35.0, n_el=24, **kw):
    return VirtualSensor(
        poses=poses,
        azimuth_count=az,
        elevation_angles=np.radians(np.linspace(el_lo, el_hi, n_el)),
        **kw,
    )


# -- terrain generation ----------------------------------------------------


def test_flat_terrain_is_flat():
    t = flat_terrain(size=10.0, res=0.5, z=3.0)
    assert t.heights.shape == (21, 21)
    assert np.all(t.heights == 3.0)
    assert t.extent == (0.0, 10.0, 0.0, 10.0)


def test_bench_face_profile():
    spec = TerrainSpec(
        kind="bench_face",
        size=(30.0, 10.0),
        resolution=0.5,
        base_height=2.0,
        face_x=10.0,
        face_slope_deg=70.0,
        crest_height=12.0,
    )
    t = generate_terrain(spec)
    # floor before the face, crest well past it, monotone in between
    assert t.height_at(5.0, 5.0) == pytest.approx(2.0)
    assert t.height_at(29.0, 5.0) == pytest.approx(12.0)
    assert t.heights.max() == pytest.approx(12.0)
    profile = t.heights[:, 0]
    assert np.all(np.diff(profile) >= -1e-12)
    # slope of the rising section matches the requested angle
    rise_cell = int((10.0 + 1.0) / 0.5)
    got = (profile[rise_cell + 1] - profile[rise_cell]) / 0.5
    assert got == pytest.approx(math.tan(math.radians(70.0)))


def test_rough_terrain_deterministic_and_banded():
    spec = TerrainSpec(
        kind="rough", size=(20.0, 20.0), resolution=0.25, base_height=5.0, amplitude=0.8
    )
    a = generate_terrain(spec, seed=7)
    b = generate_terrain(spec, seed=7)
    c = generate_terrain(spec, seed=8)
    assert np.array_equal(a.heights, b.heights)
    assert not np.array_equal(a.heights, c.heights)
    assert a.heights.min() >= 0.0 and a.heights.max() <= 20.0
    assert a.heights.std() == pytest.approx(0.8, rel=0.05)


def test_terrain_rejects_band_violation():
    with pytest.raises(RangeViolationError):
        TrueTerrain(heights=np.full((3, 3), 25.0), origin=(0, 0), resolution=1.0)


def test_height_at_interpolates_and_outside():
    t = TrueTerrain(
        heights=np.array([[0.0, 0.0], [0.0, 4.0]]), origin=(0.0, 0.0), resolution=2.0
    )
    assert t.height_at(1.0, 1.0) == pytest.approx(1.0)  # bilinear centre
    assert t.height_at(2.0, 2.0) == pytest.approx(4.0)
    assert t.height_at(2.0, 1.0) == pytest.approx(2.0)
    assert math.isnan(t.height_at(-1.5, 1.0))
    assert math.isnan(t.height_at(1.0, 3.5))


# -- events ----------------------------------------------------------------


def test_event_sign_conventions():
    with pytest.raises(InvalidConfigError):
        Event(at_scan=0, kind="excavate", footprint=(0, 0, 1, 1), dh=0.5)
    with pytest.raises(InvalidConfigError):
        Event(at_scan=0, kind="spill", footprint=(0, 0, 1, 1), dh=-0.5)
    with pytest.raises(InvalidConfigError):
        Event(at_scan=0, kind="excavate", footprint=(2, 0, 1, 1), dh=-0.5)
    with pytest.raises(InvalidConfigError):
        Event(at_scan=0, kind="dig", footprint=(0, 0, 1, 1), dh=-0.5)


def test_event_volume_closed_forms():
    exc = Event(at_scan=0, kind="excavate", footprint=(0, 0, 4, 4), dh=-1.0)
    assert event_volume_added(exc) == pytest.approx(-16.0)
    ramp = Event(at_scan=0, kind="spill", footprint=(0, 0, 2, 3), dh=2.0, shape="ramp")
    assert event_volume_added(ramp) == pytest.approx(6.0)


def test_apply_event_flat_patch():
    t = flat_terrain(size=10.0, res=0.5, z=3.0)
    ev = Event(at_scan=0, kind="excavate", footprint=(2.0, 2.0, 4.0, 4.0), dh=-1.0)
    out = apply_event(t, ev)
    assert np.all(t.heights == 3.0)  # input untouched
    assert out.height_at(3.0, 3.0) == pytest.approx(2.0)
    assert out.height_at(5.0, 5.0) == pytest.approx(3.0)
    # nodes on the closed footprint edge move with the pit; the bilinear
    # taper back to the old surface lies in the next node interval out
    assert out.height_at(4.0, 3.0) == pytest.approx(2.0)
    assert out.height_at(2.0, 3.0) == pytest.approx(2.0)
    assert out.height_at(4.25, 3.0) == pytest.approx(2.5)
    assert out.height_at(4.5, 3.0) == pytest.approx(3.0)


def test_apply_event_ramp_profile():
    t = flat_terrain(size=10.0, res=0.5, z=3.0)
    ev = Event(
        at_scan=0, kind="spill", footprint=(2.0, 2.0, 6.0, 4.0), dh=2.0, shape="ramp"
    )
    out = apply_event(t, ev)
    assert out.height_at(2.0, 3.0) == pytest.approx(3.0)  # ramp starts at zero
    assert out.height_at(4.0, 3.0) == pytest.approx(4.0)  # halfway -> dh/2
    assert out.height_at(6.0, 3.0) == pytest.approx(5.0)  # full lift at the far edge
    assert out.height_at(5.5, 3.0) == pytest.approx(3.0 + 2.0 * 3.5 / 4.0)


def test_apply_event_outside_extent_and_band():
    t = flat_terrain(size=10.0, res=0.5, z=3.0)
    with pytest.raises(InvalidConfigError):
        apply_event(t, Event(at_scan=0, kind="spill", footprint=(8, 8, 12, 12), dh=1.0))
    with pytest.raises(RangeViolationError):
        apply_event(t, Event(at_scan=0, kind="excavate", footprint=(2, 2, 4, 4), dh=-5.0))


def test_zero_area_event_is_a_noop():
    t = flat_terrain(size=10.0, res=0.5, z=3.0)
    ev = Event(at_scan=0, kind="spill", footprint=(2.0, 2.0, 2.0, 5.0), dh=1.0)
    out = apply_event(t, ev)
    assert np.array_equal(out.heights, t.heights)
    assert event_volume_added(ev) == 0.0


def test_script_truth_cumulative_net():
    t = flat_terrain(size=10.0, res=0.5, z=3.0)
    script = [
        Event(at_scan=5, kind="excavate", footprint=(2, 2, 6, 6), dh=-1.0),
        Event(at_scan=9, kind="spill", footprint=(6, 2, 8, 5), dh=2.0, shape="ramp"),
    ]
    truth = script_truth(t, script)
    assert [e.volume_added for e in truth.events] == pytest.approx([-16.0, 6.0])
    assert [e.cumulative_net_removed for e in truth.events] == pytest.approx([16.0, 10.0])
    assert truth.net_removed_total == pytest.approx(10.0)
    assert truth.checkpoints[0].terrain.height_at(3.0, 3.0) == pytest.approx(2.0)
    assert truth.checkpoints[1].terrain.height_at(3.0, 3.0) == pytest.approx(2.0)


def test_script_order_enforced():
    t = flat_terrain(size=10.0, res=0.5, z=3.0)
    script = [
        Event(at_scan=9, kind="excavate", footprint=(2, 2, 6, 6), dh=-1.0),
        Event(at_scan=5, kind="excavate", footprint=(2, 2, 6, 6), dh=-1.0),
    ]
    with pytest.raises(InvalidConfigError):
        script_truth(t, script)


# -- virtual sensor --------------------------------------------------------


def test_render_flat_plane_heights():
    t = flat_terrain()
    poses = static_trajectory((20.0, 20.0, 12.0), n_scans=1)
    sensor = downward_sensor(poses, seed=3)
    scan, pose = render_scan(t, sensor, 0)
    assert scan.points.shape[0] == sensor.beams_per_scan  # every beam lands
    assert np.all(scan.labels == TERRAIN)
    r = pose.rotation_matrix()
    world = scan.points @ r.T + pose.translation
    # bisection leaves at most a quarter-step of range error
    assert np.allclose(world[:, 2], 2.0, atol=sensor.march_step / 2)
    assert np.max(np.abs(world[:, 2] - 2.0)) > 0.0  # marching, not analytic


def test_render_respects_max_range():
    t = flat_terrain()
    poses = static_trajectory((20.0, 20.0, 12.0), n_scans=1)
    near = downward_sensor(poses, el_lo=-84.0, el_hi=-35.0, max_range=12.0, seed=3)
    scan, _ = render_scan(t, near, 0)
    # shallow beams need > 12 m of range to reach the floor and drop out
    assert 0 < scan.points.shape[0] < near.beams_per_scan
    assert np.all(np.linalg.norm(scan.points, axis=1) <= 12.0 + 1e-9)


def test_render_deterministic_per_scan_index():
    t = flat_terrain()
    poses = static_trajectory((20.0, 20.0, 12.0), n_scans=3)
    sensor = downward_sensor(poses, range_noise_sigma=0.02, dust_rate=0.05, seed=11)
    a1, _ = render_scan(t, sensor, 1)
    a2, _ = render_scan(t, sensor, 1)
    b, _ = render_scan(t, sensor, 2)
    assert np.array_equal(a1.points, a2.points)
    assert not np.array_equal(a1.points, b.points)


def test_range_noise_statistics():
    t = flat_terrain()
    poses = static_trajectory((20.0, 20.0, 12.0), n_scans=1)
    clean, _ = render_scan(t, downward_sensor(poses, seed=5), 0)
    noisy, _ = render_scan(t, downward_sensor(poses, range_noise_sigma=0.03, seed=5), 0)
    dr = np.linalg.norm(noisy.points, axis=1) - np.linalg.norm(clean.points, axis=1)
    n = dr.size
    assert abs(dr.mean()) < 4 * 0.03 / math.sqrt(n)
    assert dr.std() == pytest.approx(0.03, rel=0.15)


def test_dust_fraction_and_placement():
    t = flat_terrain()
    poses = static_trajectory((20.0, 20.0, 12.0), n_scans=1)
    sensor = downward_sensor(poses, az=120, n_el=24, dust_rate=0.1, seed=9)
    scan, pose = render_scan(t, sensor, 0)
    assert scan.points.shape[0] == sensor.beams_per_scan
    world = scan.points @ pose.rotation_matrix().T + pose.translation
    airborne = world[:, 2] > 2.0 + 0.1
    n = sensor.beams_per_scan
    sigma = math.sqrt(n * 0.1 * 0.9)
    assert abs(airborne.sum() - 0.1 * n) < 3 * sigma
    # dust sits strictly between the sensor and the surface it hides
    assert np.all(world[:, 2] <= 12.0 + 1e-9)
    assert np.all(world[:, 2] >= 2.0 - sensor.march_step / 2)
    # and every dusty beam still carries the terrain label
    assert np.all(scan.labels == TERRAIN)


def test_dust_rate_zero_means_no_dust():
    t = flat_terrain()
    poses = static_trajectory((20.0, 20.0, 12.0), n_scans=1)
    scan, pose = render_scan(t, downward_sensor(poses, seed=2), 0)
    world = scan.points @ pose.rotation_matrix().T + pose.translation
    assert np.all(world[:, 2] < 2.0 + 0.05)


def test_partial_azimuth_span_narrows_the_fan():
    t = flat_terrain()
    poses = static_trajectory((20.0, 20.0, 12.0), n_scans=1, yaw=0.0)
    sensor = downward_sensor(poses, az=40, azimuth_span=math.radians(60.0), seed=1)
    scan, _ = render_scan(t, sensor, 0)
    az = np.arctan2(scan.points[:, 1], scan.points[:, 0])
    assert np.max(np.abs(az)) < math.radians(30.0) + 1e-9


def test_sensor_validation():
    poses = static_trajectory((0.0, 0.0, 5.0), n_scans=1)
    with pytest.raises(InvalidConfigError):
        downward_sensor(poses, dust_rate=1.0)
    with pytest.raises(InvalidConfigError):
        downward_sensor([], dust_rate=0.0)
    with pytest.raises(InvalidConfigError):
        downward_sensor(poses, az=0)
    with pytest.raises(IndexError):
        render_scan(flat_terrain(), downward_sensor(poses), 1)


# -- trajectories ----------------------------------------------------------


def test_orbit_trajectory_geometry():
    poses = orbit_trajectory((20.0, 20.0), 3.0, 12.0, n_scans=30, scans_per_rev=30)
    for p in poses:
        d = math.hypot(p.translation[0] - 20.0, p.translation[1] - 20.0)
        assert d == pytest.approx(3.0)
        assert p.translation[2] == 12.0
        # yaw faces the orbit centre: +x axis of the sensor maps inward
        fwd = p.rotation_matrix() @ np.array([1.0, 0.0, 0.0])
        inward = np.array([20.0 - p.translation[0], 20.0 - p.translation[1], 0.0]) / d
        assert np.allclose(fwd, inward, atol=1e-9)
    assert poses[0].scan_index == 0 and poses[29].scan_index == 29


def test_swing_trajectory_oscillates():
    poses = swing_trajectory((5.0, 5.0, 8.0), 0.0, math.pi / 4, 20, n_scans=20)
    yaws = [2.0 * math.atan2(p.rotation[3], p.rotation[0]) for p in poses]
    assert yaws[0] == pytest.approx(0.0)
    assert max(yaws) == pytest.approx(math.pi / 4, abs=1e-6)
    assert min(yaws) == pytest.approx(-math.pi / 4, abs=1e-6)


# -- scenario assembly -----------------------------------------------------


def test_iter_scenario_applies_events_on_cue():
    t = flat_terrain(size=10.0, res=0.0625, z=3.0)
    script = [Event(at_scan=1, kind="excavate", footprint=(4.0, 4.0, 6.0, 6.0), dh=-1.0)]
    poses = static_trajectory((5.0, 5.0, 9.0), n_scans=2)
    sensor = downward_sensor(poses, az=60, el_lo=-85.0, el_hi=-45.0, n_el=16, seed=4)
    frames = list(iter_scenario(t, script, sensor, 2))
    for k, (scan, pose) in enumerate(frames):
        world = scan.points @ pose.rotation_matrix().T + pose.translation
        inside = (
            (world[:, 0] > 4.2) & (world[:, 0] < 5.8)
            & (world[:, 1] > 4.2) & (world[:, 1] < 5.8)
        )
        assert inside.any()
        want = 3.0 if k == 0 else 2.0
        assert np.allclose(world[inside, 2], want, atol=0.05)


def test_run_scenario_collects_everything():
    t = flat_terrain(size=10.0, res=0.125, z=3.0)
    script = [Event(at_scan=2, kind="excavate", footprint=(4, 4, 6, 6), dh=-0.5)]
    poses = static_trajectory((5.0, 5.0, 9.0), n_scans=4)
    sensor = downward_sensor(poses, az=30, n_el=8, seed=6)
    run = run_scenario(t, script, sensor, 4)
    assert len(run.scans) == 4 and len(run.poses) == 4
    assert run.truth.net_removed_total == pytest.approx(2.0)
    assert run.poses[3].scan_index == 3


def test_run_scenario_rejects_short_trajectory():
    t = flat_terrain(size=10.0, res=0.125, z=3.0)
    poses = static_trajectory((5.0, 5.0, 9.0), n_scans=2)
    with pytest.raises(InvalidConfigError):
        list(iter_scenario(t, [], downward_sensor(poses, az=10, n_el=4), 5))


SCENARIO_JSON = {
    "name": "toy",
    "seed": 12,
    "n_scans": 3,
    "grid": {"h_min": 0.0, "h_max": 20.0, "delta": 0.25, "m_init": 1},
    "terrain": {"kind": "flat", "size": [12.0, 12.0], "resolution": 0.125, "base_height": 2.0},
    "events": [
        {"at_scan": 1, "kind": "excavate", "footprint": [4, 4, 6, 6], "dh": -1.0}
    ],
    "sensor": {
        "azimuth_count": 30,
        "elevation_min_deg": -84.0,
        "elevation_max_deg": -40.0,
        "elevation_count": 12,
        "range_noise_sigma": 0.01,
        "dust_rate": 0.0,
        "max_range": 60.0,
    },
    "trajectory": {"kind": "static", "position": [6.0, 6.0, 10.0]},
}


def test_load_scenario_roundtrip(tmp_path):
    path = tmp_path / "toy.scenario"
    path.write_text(json.dumps(SCENARIO_JSON))
    sc = load_scenario(path)
    assert sc.name == "toy" and sc.n_scans == 3 and sc.grid.m_init == 1
    terrain, events, sensor = sc.build()
    # rays march at the terrain's node spacing
    assert sensor.march_step == pytest.approx(0.125)
    assert sensor.seed == 12
    assert len(events) == 1
    run = run_scenario(terrain, events, sensor, sc.n_scans)
    assert len(run.scans) == 3
    # same file, same bytes-in -> same points out
    terrain2, events2, sensor2 = load_scenario(path).build()
    run2 = run_scenario(terrain2, events2, sensor2, 3)
    for a, b in zip(run.scans, run2.scans):
        assert np.array_equal(a.points, b.points)


def test_load_scenario_error_names_the_field(tmp_path):
    bad = dict(SCENARIO_JSON)
    del bad["n_scans"]
    path = tmp_path / "bad.scenario"
    path.write_text(json.dumps(bad))
    with pytest.raises(InvalidConfigError, match="n_scans"):
        load_scenario(path)

    bad = json.loads(json.dumps(SCENARIO_JSON))
    bad["events"][0]["dh"] = 1.0  # excavate must not raise the ground
    path.write_text(json.dumps(bad))
    with pytest.raises(InvalidConfigError, match="events"):
        load_scenario(path)

    bad = json.loads(json.dumps(SCENARIO_JSON))
    bad["terrain"]["kind"] = "lunar"
    path.write_text(json.dumps(bad))
    with pytest.raises(InvalidConfigError, match="terrain"):
        load_scenario(path)

    path.write_text("{not json")
    with pytest.raises(InvalidConfigError, match="JSON"):
        load_scenario(path)
