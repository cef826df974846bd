import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vdest.core_math import G, is_spd
from vdest.sensors import ActuationSample, ImuSample, WheelSpeeds
from vdest.sideslip_ukf import (
    BelowMinSpeed,
    MeasurementContext,
    SideslipUkf,
    SlipState,
    UkfConfig,
    UkfEstimate,
    adaptive_R,
    axle_normal_loads,
    excitation,
    hold,
    initial_estimate,
    magic_formula,
    magic_formula_inverse,
    measurement_model_h,
    recombine,
    sigma_points,
    ukf_predict,
    ukf_update,
    velocity_packet,
    virtual_measurements_g,
)
from vdest.virtual_velocity import MFCoeffs, VehicleParams

P = VehicleParams()
DT = 0.008
COEFFS = [MFCoeffs(14.0, 1.65, 1.6, 0.0), MFCoeffs(20.0, 1.5, 1.6, 0.0), MFCoeffs(10.0, 1.9, 1.0, 0.97),
          MFCoeffs(8.0, 1.3, 1.2, -0.5)]


def imu(gyro=(0, 0, 0), accel=(0, 0, G)):
    return ImuSample(0.0, np.asarray(gyro, float), np.asarray(accel, float))


def ukf_est(v, beta, P_=None):
    return UkfEstimate(np.array([v, beta]), np.diag([1e-12, 1e-12]) if P_ is None else np.asarray(P_, float), 0.0)


# ---------------------------------------------------------------- tire model


@pytest.mark.parametrize("c", COEFFS)
def test_mf_odd_and_zero(c):
    assert magic_formula(0.0, c) == 0.0
    x = np.linspace(-0.5, 0.5, 101)
    np.testing.assert_allclose(magic_formula(-x, c), -magic_formula(x, c), atol=1e-15)


@pytest.mark.parametrize("c", COEFFS)
def test_mf_slope_at_origin(c):
    h = 1e-6
    slope = (magic_formula(h, c) - magic_formula(-h, c)) / (2 * h)
    assert slope == pytest.approx(c.B * c.C * c.D, rel=1e-6)


@given(st.floats(-0.9, 0.9))
def test_mf_inverse_roundtrip(frac):
    c = COEFFS[0]
    f = frac * magic_formula(0.2, c)  # below the peak
    assert magic_formula(magic_formula_inverse(f, c), c) == pytest.approx(f, abs=1e-10)


def test_mf_inverse_beyond_peak():
    with pytest.raises(ValueError):
        magic_formula_inverse(1.7, COEFFS[0])


def test_axle_loads():
    fzf, fzr = axle_normal_loads(P)
    assert fzf == pytest.approx(750 * 9.81 * 1.4 / 3.0)
    assert fzf == pytest.approx(3433.5)
    assert fzf + fzr == pytest.approx(750 * 9.81)
    sym = VehicleParams(l_f=1.5, l_r=1.5)
    a, b = axle_normal_loads(sym)
    assert a == pytest.approx(b)


def test_axle_load_transfer():
    tall = VehicleParams(h_cog=0.3)
    f0, r0 = axle_normal_loads(tall, 0.0)
    f5, r5 = axle_normal_loads(tall, 5.0)
    assert f0 - f5 == pytest.approx(375.0)
    assert r5 - r0 == pytest.approx(375.0)


# ---------------------------------------------------------------- sigma points


@given(st.floats(-50, 50), st.floats(-0.5, 0.5), st.floats(0.01, 10), st.floats(1e-6, 0.1), st.floats(-0.9, 0.9),
       st.floats(0.05, 1.0))
def test_recombination_identity(v, b, pvv, pbb, rho, alpha):
    cov = rho * math.sqrt(pvv * pbb)
    Pm = np.array([[pvv, cov], [cov, pbb]])
    X, wm, wc = sigma_points([v, b], Pm, alpha=alpha)
    assert wm.sum() == pytest.approx(1.0, abs=1e-12)
    mean, Pr = recombine(X, wm, wc)
    np.testing.assert_allclose(mean, [v, b], atol=1e-10 * max(1.0, abs(v)))
    np.testing.assert_allclose(Pr, Pm, atol=1e-10 * max(1.0, pvv))


def test_recombination_three_states(rng):
    A = rng.normal(size=(3, 3))
    Pm = A @ A.T + np.eye(3)
    X, wm, wc = sigma_points([1.0, -2.0, 3.0], Pm)
    mean, Pr = recombine(X, wm, wc)
    np.testing.assert_allclose(mean, [1.0, -2.0, 3.0], atol=1e-10)
    np.testing.assert_allclose(Pr, Pm, atol=1e-10)


def test_sigma_points_reject_non_pd():
    with pytest.raises(np.linalg.LinAlgError):
        sigma_points([1.0, 0.0], np.array([[1.0, 2.0], [2.0, 1.0]]))


# ---------------------------------------------------------------- predict


def test_predict_zero_slip_reduction():
    est = ukf_est(30.0, 0.0)
    out = ukf_predict(est, imu((0, 0, 0.2), (1.5, 0.0, G)), (0.0, 0.0), DT)
    assert out.x[0] == pytest.approx(30.0 + 1.5 * DT, abs=1e-9)
    assert out.x[1] == pytest.approx(-0.2 * DT, abs=1e-9)


@given(st.floats(10, 80), st.floats(-0.2, 0.2), st.floats(-0.5, 0.5), st.floats(-0.35, 0.35), st.floats(-0.1, 0.1))
def test_predict_equilibrium(v, beta, wz, roll, pitch):
    # inputs solving vdot = 0 and betadot = 0 for this state
    lon = -math.sin(beta) * v * wz
    lat = math.cos(beta) * v * wz
    ax = lon - G * math.sin(pitch)
    ay = lat + G * math.sin(roll) * math.cos(pitch)
    est = ukf_est(v, beta)
    out = ukf_predict(est, imu((0, 0, wz), (ax, ay, G)), (roll, pitch), DT)
    np.testing.assert_allclose(out.x, est.x, atol=1e-9)


def test_predict_mean_matches_monte_carlo():
    rng = np.random.default_rng(3)
    Pm = np.array([[0.5, 0.002], [0.002, 1e-3]])
    est = UkfEstimate(np.array([25.0, 0.05]), Pm, 0.0)
    u = imu((0, 0, 0.4), (2.0, 9.0, G))
    road = (math.radians(-10.0), 0.01)
    cfg = UkfConfig(q_v=0.0, q_beta=0.0)
    out = ukf_predict(est, u, road, DT, cfg)
    n = 200_000
    s = rng.multivariate_normal(est.x, Pm, n)
    v, b = s[:, 0], s[:, 1]
    lon = u.accel[0] + G * math.sin(road[1])
    lat = u.accel[1] - G * math.sin(road[0]) * math.cos(road[1])
    v1 = v + DT * (np.cos(b) * lon + np.sin(b) * lat)
    b1 = b + DT * (-np.sin(b) * lon / v + np.cos(b) * lat / v - u.gyro[2])
    mc = np.array([v1.mean(), b1.mean()])
    se = np.array([v1.std(), b1.std()]) / math.sqrt(n)
    assert np.all(np.abs(out.x - mc) < 3 * se)


@given(st.floats(-3, 3), st.floats(-0.1, 0.1))
def test_beta_depends_on_longitudinal_sum_only(ax, pitch):
    # shift a_x and g sin(theta) against each other; with zero roll the lateral term ignores pitch
    est = UkfEstimate(np.array([30.0, 0.03]), np.diag([0.2, 1e-4]), 0.0)
    a = ukf_predict(est, imu((0, 0, 0.3), (ax, 5.0, G)), (0.0, 0.0), DT)
    shifted = ax - G * math.sin(pitch)
    b = ukf_predict(est, imu((0, 0, 0.3), (shifted, 5.0, G)), (0.0, pitch), DT)
    np.testing.assert_allclose(b.x, a.x, atol=1e-12)
    np.testing.assert_allclose(b.P, a.P, atol=1e-12)


def test_predict_below_min_speed():
    with pytest.raises(BelowMinSpeed):
        ukf_predict(ukf_est(3.0, 0.0), imu(), (0.0, 0.0), DT)
    est = initial_estimate(3.0, 0.0)
    held = hold(est, DT)
    np.testing.assert_array_equal(held.x, est.x)
    assert np.all(np.diag(held.P) > np.diag(est.P))


# ---------------------------------------------------------------- measurement rows


def _ctx(wz=0.0, steer=0.0, vwf=30.0, vwr=30.0):
    fzf, fzr = axle_normal_loads(P)
    return MeasurementContext(wz, steer, vwf, vwr, fzf, fzr)


def test_h_straight_rows_equal_speed():
    y = measurement_model_h(SlipState(30.0, 0.0), _ctx(), P)
    np.testing.assert_allclose(y[:2], 30.0)
    np.testing.assert_allclose(y[2:], 0.0, atol=1e-12)


def test_h_scalar_oracle():
    v, beta, wz, steer = 40.0, 0.02, 0.15, 0.05
    vwf, vwr = 40.5, 40.8
    fzf, fzr = axle_normal_loads(P)
    y = measurement_model_h(SlipState(v, beta), _ctx(wz, steer, vwf, vwr), P)
    v_fa = v * math.cos(steer - beta) + P.l_f * wz * math.sin(steer)
    v_ra = v * math.cos(beta)
    vx, vy = v * math.cos(beta), v * math.sin(beta)
    expected = [
        v_fa, v_fa,
        fzf * magic_formula((vwf - v_fa) / v_fa, P.mf_x_f),
        fzr * magic_formula((vwr - v_ra) / v_ra, P.mf_x_r),
        fzf * magic_formula(steer - math.atan((vy + P.l_f * wz) / vx), P.mf_y_f),
        fzr * magic_formula(-math.atan((vy - P.l_r * wz) / vx), P.mf_y_r),
    ]
    np.testing.assert_allclose(y, expected, rtol=1e-12)


def test_g_coasting():
    w = WheelSpeeds(0.0, 100.0, 100.0, 97.0, 97.0)
    z = virtual_measurements_g(w, ActuationSample(0.0, 0.0), imu(), 0.0, P)
    np.testing.assert_allclose(z[:2], 100.0 * P.r_dyn_f)
    np.testing.assert_allclose(z[2:], 0.0, atol=1e-12)


def test_g_brake_row():
    z = virtual_measurements_g(WheelSpeeds(0.0, 0, 0, 0, 0), ActuationSample(0.0, 0.0, 300.0, 300.0), imu(), 0.0, P)
    assert z[2] == pytest.approx(2000.0)


def test_g_lateral_rows():
    z = virtual_measurements_g(WheelSpeeds(0.0, 0, 0, 0, 0), ActuationSample(0.0, 0.0), imu(accel=(0, 10.0, G)), 0.0, P)
    assert z[4] == pytest.approx(3500.0)
    assert z[5] == pytest.approx(4000.0)


# ---------------------------------------------------------------- adaptive R


def test_adaptive_r_endpoints():
    cfg = UkfConfig()
    R0 = adaptive_R(imu(), cfg)
    np.testing.assert_allclose(np.diag(R0), [cfg.sigma_wheel_min**2] * 2 + [cfg.sigma_force_max**2] * 4)
    R1 = adaptive_R(imu(accel=(20.0, 20.0, G)), cfg)
    np.testing.assert_allclose(np.diag(R1), [cfg.sigma_wheel_max**2] * 2 + [cfg.sigma_force_min**2] * 4)


def test_adaptive_r_monotone():
    cfg = UkfConfig()
    prev = None
    for ay in np.linspace(0.0, cfg.accel_saturation, 41):
        d = np.diag(adaptive_R(imu(accel=(0.0, ay, G)), cfg))
        if prev is not None:
            assert d[0] >= prev[0] and d[2] <= prev[2]
        if 0.0 < ay < cfg.accel_saturation:
            assert cfg.sigma_wheel_min**2 < d[0] < cfg.sigma_wheel_max**2
            assert cfg.sigma_force_min**2 < d[2] < cfg.sigma_force_max**2
        prev = d
    assert excitation(imu(accel=(0.0, 4.0, G)), cfg) == pytest.approx(0.5)


# ---------------------------------------------------------------- update


def test_update_infinite_noise():
    est = UkfEstimate(np.array([30.0, 0.02]), np.diag([1.0, 1e-3]), 0.0)
    out = ukf_update(est, np.full(6, 1e3), np.eye(6) * 1e30, _ctx(), P)
    np.testing.assert_allclose(out.x, est.x, atol=1e-12)


@given(st.floats(5.5, 60.0), st.floats(-0.2, 0.2), st.floats(0.01, 5.0), st.floats(-0.9, 0.9), st.floats(1e-3, 5.0),
       st.floats(-3, 3))
def test_update_linear_stub_is_kalman(v, beta, pvv, rho, r, dz):
    pbb = 1e-3
    pvb = rho * math.sqrt(pvv * pbb)
    est = UkfEstimate(np.array([v, beta]), np.array([[pvv, pvb], [pvb, pbb]]), 0.0)
    out = ukf_update(est, [v + dz], [[r]], h=lambda x: x[:1])
    k = np.array([pvv, pvb]) / (pvv + r)
    expected_x = est.x + k * dz
    expected_x[1] = np.clip(expected_x[1], -math.radians(30), math.radians(30))
    np.testing.assert_allclose(out.x, expected_x, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(out.P, est.P - np.outer(k, k) * (pvv + r), rtol=1e-9, atol=1e-12)


def test_packet_magnitude_and_covariance():
    est = UkfEstimate(np.array([42.0, -0.07]), np.array([[0.3, 1e-3], [1e-3, 2e-4]]), 1.0)
    pkt = velocity_packet(est)
    assert math.hypot(*pkt.value) == pytest.approx(42.0, rel=1e-15)
    assert is_spd(pkt.R)


def test_low_excitation_convergence():
    ukf = SideslipUkf(P)
    v_true = 30.0
    ukf.initialize(0.8 * v_true, 0.0)
    w_rad = v_true / P.r_dyn_f
    wr = v_true / P.r_dyn_r
    u = imu()
    for k in range(125):
        ukf.step(u, (0.0, 0.0), DT, WheelSpeeds(k * DT, w_rad, w_rad, wr, wr), ActuationSample(k * DT, 0.0), 0.0)
    assert excitation(u, ukf.cfg) == 0.0
    assert abs(ukf.est.x[0] - v_true) / v_true < 0.01
    assert not ukf.events


def test_wrapper_holds_below_min_speed():
    ukf = SideslipUkf(P)
    ukf.initialize(2.0, 0.0)
    w = WheelSpeeds(0.0, 6.0, 6.0, 6.0, 6.0)
    assert ukf.step(imu(), (0.0, 0.0), DT, w, ActuationSample(0.0, 0.0), 0.0) is None
    assert ukf.est.x[0] == pytest.approx(6.0 * P.r_dyn_f)
