"""Geometric and numerical primitives shared by the estimators.

Frames
------
nav:  local planar metric frame, x east, y north, z up.
body: x forward, y left, z up, origin at the centre of gravity.

Euler angles use the ZYX (yaw-pitch-roll) sequence, ``R = Rz(yaw) Ry(pitch) Rx(roll)``.
With z up a positive pitch tilts the nose *down*, and a positive roll lifts
the left side of the vehicle.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.interpolate import CubicHermiteSpline, CubicSpline
from scipy.spatial import cKDTree

G = 9.81
GIMBAL_MARGIN = 1e-3


class GimbalProximity(ValueError):
    """Pitch too close to +-90 deg for the Euler kinematics."""


class OutOfCorridor(ValueError):
    """Query point too far from the track to project."""


class CovarianceNotPD(np.linalg.LinAlgError):
    """Covariance failed the symmetric positive-definiteness check."""


class EulerAngles(NamedTuple):
    roll: float
    pitch: float
    yaw: float


class FrenetCoord(NamedTuple):
    s: float
    d: float


def wrap_angle(a):
    """Wrap to (-pi, pi]. Works on scalars and arrays."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def skew(v: ArrayLike) -> NDArray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def euler_rate_matrix(roll: float, pitch: float) -> NDArray:
    """Matrix mapping body angular rate to (roll, pitch, yaw) rates."""
    if abs(pitch) >= math.pi / 2 - GIMBAL_MARGIN:
        raise GimbalProximity(f"pitch {pitch:.6f} rad within {GIMBAL_MARGIN} of +-pi/2")
    sr, cr = math.sin(roll), math.cos(roll)
    tp, sec = math.tan(pitch), 1.0 / math.cos(pitch)
    return np.array(
        [
            [1.0, sr * tp, cr * tp],
            [0.0, cr, -sr],
            [0.0, sr * sec, cr * sec],
        ]
    )


def euler_rates(angles, omega_body: ArrayLike) -> NDArray:
    """Euler angle rates (roll, pitch, yaw) for a body angular rate."""
    roll, pitch = angles[0], angles[1]
    return euler_rate_matrix(roll, pitch) @ np.asarray(omega_body, dtype=float)


def body_to_nav(angles) -> NDArray:
    """Rotation matrix taking body-frame vectors to the nav frame."""
    roll, pitch, yaw = angles[0], angles[1], angles[2]
    sr, cr = math.sin(roll), math.cos(roll)
    sp, cp = math.sin(pitch), math.cos(pitch)
    sy, cy = math.sin(yaw), math.cos(yaw)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def angles_from_matrix(R: ArrayLike) -> EulerAngles:
    R = np.asarray(R, dtype=float)
    pitch = -math.asin(max(-1.0, min(1.0, R[2, 0])))
    roll = math.atan2(R[2, 1], R[2, 2])
    yaw = math.atan2(R[1, 0], R[0, 0])
    return EulerAngles(roll, pitch, yaw)


def gravity_body(roll: float, pitch: float, g: float = G) -> NDArray:
    """Nav gravity (0, 0, -g) expressed in the body frame."""
    return g * np.array(
        [math.sin(pitch), -math.sin(roll) * math.cos(pitch), -math.cos(roll) * math.cos(pitch)]
    )


def rot_z(angle: float) -> NDArray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def symmetrize(P: ArrayLike) -> NDArray:
    P = np.asarray(P, dtype=float)
    return 0.5 * (P + P.T)


def is_spd(P: ArrayLike, tol: float = 1e-9) -> bool:
    """Symmetric positive-definite check after symmetrization."""
    P = np.asarray(P, dtype=float)
    if not np.all(np.isfinite(P)):
        return False
    Ps = symmetrize(P)
    if np.max(np.abs(P - Ps), initial=0.0) > tol * max(1.0, np.max(np.abs(Ps))):
        return False
    try:
        np.linalg.cholesky(Ps)
    except np.linalg.LinAlgError:
        return False
    return bool(np.min(np.linalg.eigvalsh(Ps)) > -tol)


def require_spd(P: ArrayLike, what: str = "covariance", tol: float = 1e-9) -> NDArray:
    if not is_spd(P, tol):
        raise CovarianceNotPD(f"{what} is not symmetric positive-definite")
    return symmetrize(P)


class Centerline:
    """Closed reference line parameterised by horizontal arclength.

    Built either from sampled points (periodic cubic spline) or, when the
    tangent direction is known analytically, from a Hermite spline that
    honours it at every knot.
    """

    def __init__(self, s_knots, xy_closed, z_closed, tangent=None):
        s = np.asarray(s_knots, dtype=float)
        xy_closed = np.asarray(xy_closed, dtype=float)
        z_closed = np.asarray(z_closed, dtype=float)
        self.s_knots = s
        self.xy = xy_closed
        self.length = float(s[-1])
        if tangent is None:
            self._sx = CubicSpline(s, xy_closed[:, 0], bc_type="periodic")
            self._sy = CubicSpline(s, xy_closed[:, 1], bc_type="periodic")
        else:
            tangent = np.asarray(tangent, dtype=float)
            self._sx = CubicHermiteSpline(s, xy_closed[:, 0], tangent[:, 0])
            self._sy = CubicHermiteSpline(s, xy_closed[:, 1], tangent[:, 1])
        self._sz = CubicSpline(s, z_closed, bc_type="periodic") if np.any(z_closed) else None
        step = float(np.median(np.diff(s)))
        n_dense = max(int(self.length / min(step, 1.0)), 16)
        self._dense_s = np.linspace(0.0, self.length, n_dense, endpoint=False)
        self._tree = cKDTree(self.point(self._dense_s))
        self.bbox = (xy_closed.min(axis=0), xy_closed.max(axis=0))

    @classmethod
    def from_points(cls, xy: ArrayLike, z: ArrayLike | None = None) -> "Centerline":
        xy = np.asarray(xy, dtype=float)
        if np.allclose(xy[0], xy[-1]):
            xy = xy[:-1]
        z = np.zeros(len(xy)) if z is None else np.asarray(z, dtype=float)[: len(xy)]
        closed = np.vstack([xy, xy[:1]])
        s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(closed, axis=0), axis=1))])
        sx = CubicSpline(s, closed[:, 0], bc_type="periodic")
        sy = CubicSpline(s, closed[:, 1], bc_type="periodic")
        # one reparameterisation pass so s is arclength to spline accuracy
        fine = np.linspace(0.0, s[-1], 20 * len(s) + 1)
        speed = np.hypot(sx(fine, 1), sy(fine, 1))
        true_s = np.concatenate([[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) * np.diff(fine))])
        return cls(np.interp(s, fine, true_s), closed, np.concatenate([z, z[:1]]))

    @classmethod
    def from_hermite(cls, s: ArrayLike, xy: ArrayLike, tangent: ArrayLike, z=None) -> "Centerline":
        z = np.zeros(len(s)) if z is None else z
        return cls(s, xy, z, tangent)

    def wrap_s(self, s):
        return np.mod(s, self.length)

    def point(self, s) -> NDArray:
        s = self.wrap_s(np.asarray(s, dtype=float))
        return np.stack([self._sx(s), self._sy(s)], axis=-1)

    def height(self, s):
        s = self.wrap_s(np.asarray(s, dtype=float))
        return np.zeros_like(s) if self._sz is None else self._sz(s)

    def derivative(self, s, order: int = 1) -> NDArray:
        s = self.wrap_s(np.asarray(s, dtype=float))
        return np.stack([self._sx(s, order), self._sy(s, order)], axis=-1)

    def tangent(self, s) -> NDArray:
        d = self.derivative(s)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def left_normal(self, s) -> NDArray:
        t = self.tangent(s)
        return np.stack([-t[..., 1], t[..., 0]], axis=-1)

    def heading(self, s):
        t = self.tangent(s)
        return np.arctan2(t[..., 1], t[..., 0])

    def project(self, xy: ArrayLike, s_hint=None, hint_window: float = 30.0):
        """Project horizontal points onto the line: returns (s, d) arrays."""
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        lo, hi = self.bbox
        margin = 50.0
        outside = np.any((xy < lo - margin) | (xy > hi + margin), axis=1)
        if np.any(outside):
            raise OutOfCorridor(f"{int(outside.sum())} point(s) beyond the 50 m track margin")
        _, idx = self._tree.query(xy)
        s0 = self._dense_s[idx]
        if s_hint is not None:
            s_hint = np.broadcast_to(np.asarray(s_hint, dtype=float), s0.shape)
            # coarse search restricted to the hint window, for self-overlapping layouts
            offs = np.linspace(-hint_window, hint_window, 121)
            cand = s_hint[:, None] + offs[None, :]
            pts = self.point(cand)
            dist = np.linalg.norm(pts - xy[:, None, :], axis=-1)
            s_win = cand[np.arange(len(xy)), np.argmin(dist, axis=1)]
            d_win = np.min(dist, axis=1)
            d_glob = np.linalg.norm(self.point(s0) - xy, axis=1)
            s0 = np.where(d_win <= d_glob + 1.0, s_win, s0)
        s = s0.astype(float)
        for _ in range(8):
            c = self.point(s)
            d1 = self.derivative(s, 1)
            d2 = self.derivative(s, 2)
            r = c - xy
            f = np.sum(r * d1, axis=1)
            fp = np.sum(d1 * d1, axis=1) + np.sum(r * d2, axis=1)
            fp = np.where(fp > 1e-9, fp, np.sum(d1 * d1, axis=1))
            s = s - np.clip(f / fp, -5.0, 5.0)
        s = self.wrap_s(s)
        c = self.point(s)
        t = self.tangent(s)
        r = xy - c
        d = t[:, 0] * r[:, 1] - t[:, 1] * r[:, 0]
        return s, d


def frenet_project(track, p: ArrayLike, s_hint: float | None = None) -> FrenetCoord:
    """Frenet (s, d) of a position with respect to the track centerline.

    The projection is horizontal; ``d`` is positive toward the left bound.
    ``track`` may be a TrackModel or a bare Centerline.
    """
    line = getattr(track, "centerline", track)
    p = np.asarray(p, dtype=float)
    s, d = line.project(p[:2], s_hint=s_hint)
    return FrenetCoord(float(s[0]), float(d[0]))


def frenet_project_many(track, p: ArrayLike, s_hint=None) -> tuple[NDArray, NDArray]:
    line = getattr(track, "centerline", track)
    p = np.atleast_2d(np.asarray(p, dtype=float))
    return line.project(p[:, :2], s_hint=s_hint)
