import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vdest.core_math import (
    G,
    CovarianceNotPD,
    GimbalProximity,
    OutOfCorridor,
    angles_from_matrix,
    body_to_nav,
    euler_rates,
    frenet_project,
    frenet_project_many,
    gravity_body,
    is_spd,
    require_spd,
    wrap_angle,
)

angle = st.floats(-math.pi, math.pi)
pitch = st.floats(-1.3, 1.3)
rate = st.floats(-3.0, 3.0)


def test_euler_rates_identity_at_level():
    np.testing.assert_allclose(euler_rates((0.0, 0.0, 0.0), (0.1, 0.2, 0.3)), [0.1, 0.2, 0.3], atol=1e-15)


@given(angle, pitch, angle)
def test_euler_rates_zero_input(r, p, y):
    assert np.all(euler_rates((r, p, y), (0.0, 0.0, 0.0)) == 0.0)


def test_euler_rates_scalar_oracle():
    # frozen from a standalone scalar evaluation with math.sin/tan/cos
    out = euler_rates((math.radians(30), math.radians(20), 0.0), (0.1, 0.2, 0.3))
    np.testing.assert_allclose(out, [0.23095926415539164, 0.02320508075688779, 0.3828992727796541], rtol=1e-13)


@given(angle, pitch, st.tuples(rate, rate, rate), st.tuples(rate, rate, rate), st.floats(-2, 2), st.floats(-2, 2))
def test_euler_rates_linear(r, p, w1, w2, a, b):
    w1, w2 = np.array(w1), np.array(w2)
    lhs = euler_rates((r, p, 0.0), a * w1 + b * w2)
    rhs = a * euler_rates((r, p, 0.0), w1) + b * euler_rates((r, p, 0.0), w2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_euler_rates_gimbal_guard():
    with pytest.raises(GimbalProximity):
        euler_rates((0.0, math.pi / 2 - 1e-4, 0.0), (0.0, 0.0, 1.0))


def test_body_to_nav_trivial():
    np.testing.assert_array_equal(body_to_nav((0.0, 0.0, 0.0)), np.eye(3))
    np.testing.assert_allclose(body_to_nav((0.0, 0.0, math.pi / 2)) @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-15)


@given(angle, pitch, angle)
def test_body_to_nav_orthonormal(r, p, y):
    R = body_to_nav((r, p, y))
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)


@given(angle, pitch, angle)
def test_gravity_terms_sign_for_sign(r, p, y):
    R = body_to_nav((r, p, y))
    g_body = R.T @ np.array([0.0, 0.0, -G])
    expected = G * np.array([math.sin(p), -math.sin(r) * math.cos(p), -math.cos(r) * math.cos(p)])
    np.testing.assert_allclose(g_body, expected, atol=1e-12)
    np.testing.assert_allclose(gravity_body(r, p), expected, atol=1e-12)


@given(st.floats(-3.1, 3.1), st.floats(-1.3, 1.3), st.floats(-3.1, 3.1))
def test_angles_roundtrip(r, p, y):
    back = angles_from_matrix(body_to_nav((r, p, y)))
    np.testing.assert_allclose(back, (r, p, y), atol=1e-9)


@given(st.floats(-50.0, 50.0))
def test_wrap_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)
    assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-9)


def test_wrap_boundary():
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)


def test_spd_check():
    assert is_spd(np.diag([1.0, 2.0]))
    assert not is_spd(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert not is_spd(np.array([[1.0, 0.5], [0.0, 1.0]]))
    assert not is_spd(np.array([[np.nan, 0.0], [0.0, 1.0]]))
    with pytest.raises(CovarianceNotPD):
        require_spd(-np.eye(3))


# ---------------------------------------------------------------- frenet


def test_frenet_on_line(lvms_track):
    line = lvms_track.centerline
    for s0 in (0.0, 123.4, 600.0, 1500.0):
        p = np.append(line.point(s0), 0.0)
        s, d = frenet_project(lvms_track, p)
        assert d == pytest.approx(0.0, abs=1e-6)
        assert s == pytest.approx(s0, abs=1e-4)


def test_frenet_left_offset(lvms_track):
    line = lvms_track.centerline
    for s0 in (50.0, 700.0, 1900.0):
        p = line.point(s0) + 1.0 * line.left_normal(s0)
        s, d = frenet_project(lvms_track, np.append(p, 0.0))
        assert d == pytest.approx(1.0, abs=1e-6)
        assert s == pytest.approx(s0, abs=1e-4)


def test_frenet_brute_force(lvms_track, rng):
    line = lvms_track.centerline
    dense_s = np.arange(0.0, line.length, 0.01)
    dense = line.point(dense_s)
    s_true = rng.uniform(0.0, line.length, 100)
    d_true = rng.uniform(-8.0, 8.0, 100)
    pts = line.point(s_true) + d_true[:, None] * line.left_normal(s_true)
    s, d = frenet_project_many(lvms_track, pts)
    for k, p in enumerate(pts):
        dist = np.hypot(dense[:, 0] - p[0], dense[:, 1] - p[1])
        j = int(np.argmin(dist))
        assert abs(abs(d[k]) - dist[j]) < 2e-3
        ds = (s[k] - dense_s[j] + 0.5 * line.length) % line.length - 0.5 * line.length
        assert abs(ds) < 0.02


@given(st.floats(0.0, 2370.0), st.floats(-9.0, 9.0))
def test_frenet_reconstruction(lvms_track, s0, d0):
    line = lvms_track.centerline
    p = line.point(s0) + d0 * line.left_normal(s0)
    s, d = frenet_project(lvms_track, np.append(p, 1.0))
    back = line.point(s) + d * line.left_normal(s)
    assert np.linalg.norm(back - p) < 5e-3
    assert 0.0 <= s < line.length


def test_frenet_far_point(lvms_track):
    with pytest.raises(OutOfCorridor):
        frenet_project(lvms_track, np.array([1e5, 1e5, 0.0]))
