import math

import numpy as np
import pytest

from vdest.core_math import body_to_nav, euler_rates, gravity_body, wrap_angle
from vdest.harness.io import write_streams
from vdest.sensors import RtkStatus
from vdest.sim import (
    GNSS_DT,
    IMU_DT,
    InfeasibleProfile,
    InvalidGeometry,
    NoiseConfig,
    SpeedLimits,
    build_oval,
    build_track,
    simulate_lap,
    speed_profile,
    stationary_truth,
    synthesize_sensors,
)
from vdest.sim.synth import Window
from vdest.virtual_velocity import VehicleParams

# ---------------------------------------------------------------- track


@pytest.mark.parametrize("bank_deg", [0.0, 20.0])
def test_oval_bank_and_closure(bank_deg):
    trk = build_oval(math.radians(bank_deg), 400.0, 250.0, 18.0)
    s = np.linspace(0.0, trk.length, 4001)
    assert np.degrees(np.abs(trk.bank(s)).max()) == pytest.approx(bank_deg, abs=0.01)
    np.testing.assert_allclose(trk.centerline.point(0.0), trk.centerline.point(trk.length), atol=1e-6)
    # each ramp turns half as much as an arc of equal length, so one ramp length is added per half lap
    assert trk.length == pytest.approx(2 * (400.0 + math.pi * 250.0 + 150.0))


def test_bounds_match_width():
    trk = build_oval(math.radians(20.0), 400.0, 250.0, 18.0)
    s = np.linspace(0.0, trk.length, 500)
    left, right = trk._bounds(s)
    np.testing.assert_allclose(np.linalg.norm(left - right, axis=1), 18.0, rtol=1e-12)
    # left of the centerline on a counter-clockwise oval lies inside the turn, so lower
    turn = np.abs(trk.curvature(s)) > 0.0039
    assert np.all(left[turn, 2] < right[turn, 2])


def test_bank_from_bounds():
    trk = build_oval(math.radians(20.0), 400.0, 250.0, 18.0)
    s = np.linspace(0.0, trk.length, 2000)
    np.testing.assert_allclose(trk.bank_from_bounds(s), trk.bank(s), atol=math.radians(0.1))


@pytest.mark.parametrize(
    "kw",
    [
        dict(bank_max=math.radians(30.0), straight_len=400.0, turn_radius=250.0, width=15.0),
        dict(bank_max=0.0, straight_len=-1.0, turn_radius=250.0, width=15.0),
        dict(bank_max=0.0, straight_len=400.0, turn_radius=250.0, width=0.0),
        dict(bank_max=0.0, straight_len=400.0, turn_radius=40.0, width=15.0),
    ],
)
def test_invalid_geometry(kw):
    with pytest.raises(InvalidGeometry):
        build_oval(**kw)


def test_half_lap_must_turn_pi():
    with pytest.raises(InvalidGeometry):
        build_track({"type": "half_lap", "segments": [{"length": 100.0}, {"length": 300.0, "radius": 100.0}]})
    with pytest.raises(InvalidGeometry):
        build_track({"type": "figure8"})


# ---------------------------------------------------------------- ground truth


def test_truth_kinematics_close(lvms_truth):
    gt = lvms_truth
    h = gt.dt
    idx = np.arange(2, len(gt.t) - 2, 41)
    for j in idx:
        a = gt.angles[j]
        # Richardson-extrapolated central difference, O(h^4)
        d1 = (gt.v_body[j + 1] - gt.v_body[j - 1]) / (2 * h)
        d2 = (gt.v_body[j + 2] - gt.v_body[j - 2]) / (4 * h)
        vdot = (4 * d1 - d2) / 3
        rhs = gt.a_body[j] - np.cross(gt.omega[j], gt.v_body[j]) + gravity_body(a[0], a[1])
        np.testing.assert_allclose(vdot, rhs, rtol=1e-4, atol=1e-4)
        pdot = (gt.p[j + 1] - gt.p[j - 1]) / (2 * h)
        # the centerline spline parameter is arc length only to ~1e-5
        np.testing.assert_allclose(pdot, body_to_nav(a) @ gt.v_body[j], atol=3e-5 * np.linalg.norm(gt.v_body[j]))
        adot = wrap_angle(gt.angles[j + 1] - gt.angles[j - 1]) / (2 * h)
        np.testing.assert_allclose(adot, euler_rates(a, gt.omega[j]), atol=1e-4)


def test_straight_constant_speed(lvms_truth, lvms_track):
    gt = lvms_truth
    s = gt.s % lvms_track.length
    m = (s > 0.0) & (s < 150.0)
    assert m.sum() > 1000
    assert np.abs(gt.beta[m]).max() < 1e-9
    assert np.abs(gt.a_body[m, 1]).max() < 1e-9
    assert np.abs(gt.omega[m, 2]).max() < 1e-8
    vd = np.gradient(gt.v_body[m, 0], gt.dt)
    rhs = gt.a_body[m, 0] + gravity_body(0.0, 0.0)[0]
    np.testing.assert_allclose(vd, rhs, atol=1e-9)


def test_truth_consistent_with_track(lvms_truth, lvms_track):
    gt = lvms_truth
    np.testing.assert_allclose(gt.bank, lvms_track.bank(gt.s), atol=1e-12)
    np.testing.assert_array_equal(gt.v_body[:, 2], 0.0)
    np.testing.assert_allclose(np.arctan2(gt.v_body[:, 1], gt.v_body[:, 0]), gt.beta, atol=1e-12)
    assert np.all(np.isfinite(gt.forces))


def test_stationary_truth_gravity():
    gt = stationary_truth(math.radians(20.0), math.radians(-3.0), 1.0)
    a = gt.angles[0]
    np.testing.assert_allclose(gt.a_body[0] + gravity_body(a[0], a[1]), 0.0, atol=1e-12)
    assert np.linalg.norm(gt.a_body[0]) == pytest.approx(9.81)


def test_infeasible_profile(lvms_track):
    fast = speed_profile(lvms_track, SpeedLimits(v_top=120.0, a_lat=60.0))
    with pytest.raises(InfeasibleProfile):
        simulate_lap(lvms_track, fast, VehicleParams(), duration=5.0, s0=700.0)


# ---------------------------------------------------------------- sensors


def _short_truth(lvms_truth, duration=5.0):
    return lvms_truth.__class__(
        **{k: (v[: int(duration / lvms_truth.dt) + 1] if isinstance(v, np.ndarray) else v)
           for k, v in vars(lvms_truth).items()}
    )


def test_noiseless_gnss_equals_truth(lvms_truth):
    gt = _short_truth(lvms_truth)
    st = synthesize_sensors(gt, NoiseConfig.noiseless())
    assert st.gnss
    for f in st.gnss:
        np.testing.assert_array_equal(f.p, gt.p[gt.index(f.t)])
    n0 = sum(f.source_id == 0 for f in st.gnss)
    assert n0 == pytest.approx(5.0 / GNSS_DT[0] + 1, abs=1)
    t_imu = np.unique([s.t for s in st.imu])
    np.testing.assert_allclose(np.diff(t_imu), IMU_DT, atol=1e-12)


def test_noiseless_imu_equals_truth(lvms_truth):
    gt = _short_truth(lvms_truth)
    st = synthesize_sensors(gt, NoiseConfig.noiseless(lever_arms=((0.0, 0.0, 0.0),), calibration=0.0))
    for s in st.imu[::50]:
        i = gt.index(s.t)
        np.testing.assert_allclose(s.gyro, gt.omega[i], atol=1e-12)
        np.testing.assert_allclose(s.accel, gt.a_body[i], atol=1e-12)


def test_dropout_window_suppresses_fixes(lvms_truth):
    gt = _short_truth(lvms_truth)
    st = synthesize_sensors(gt, NoiseConfig(dropouts=[Window(1.0, 2.0)]))
    ts = np.array([f.t for f in st.gnss])
    assert not np.any((ts >= 1.0) & (ts <= 2.0))
    assert np.any(ts < 1.0) and np.any(ts > 2.0)
    assert all(f.rtk_status == RtkStatus.RTK_FIXED for f in st.gnss)


def test_same_seed_same_bytes(lvms_truth, tmp_path):
    gt = _short_truth(lvms_truth, 2.0)
    paths = []
    for k, seed in enumerate((7, 7, 8)):
        p = tmp_path / f"s{k}.csv"
        write_streams(p, synthesize_sensors(gt, NoiseConfig(seed=seed)))
        paths.append(p.read_bytes())
    assert paths[0] == paths[1]
    assert paths[0] != paths[2]


def test_noise_config_validation():
    with pytest.raises(ValueError):
        NoiseConfig(gnss_sigma=-1.0)
    with pytest.raises(ValueError):
        NoiseConfig(dropouts=[Window(0.0, 2.0), Window(1.0, 3.0)])
    cfg = NoiseConfig.from_dict({"heading_bias_deg": 1.0, "dropouts": [[1.0, 2.0]],
                                 "outliers": [{"t": 3.0, "offset": [1, 0, 0]}]})
    assert cfg.heading_bias == pytest.approx(math.radians(1.0))
    assert cfg.dropouts[0].t1 == 2.0 and cfg.outliers[0].t == 3.0
