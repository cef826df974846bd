"""Ground-truth trajectories from a single-track model on a banked surface.

The centre of gravity follows the track centerline with a prescribed speed
profile. Given the path, the body motion is solved backwards. Side slip
obeys an ODE: the rear lateral force implied by the yaw balance must match
the Magic Formula at the rear slip angle, which depends on side slip and its
rate; it is integrated with RK4 on a half-step grid. Front force and
steering then follow from a few fixed-point passes (steering tilts the
front force, which changes the demand). Body angular rate and specific
force follow exactly from the attitude history, which makes the synthetic
IMU consistent with the point-mass kinematics by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline
from numba import njit
from scipy.ndimage import uniform_filter1d

from ..core_math import G
from ..sideslip_ukf import _mf, _mf_peak_slip, axle_normal_loads, magic_formula
from ..virtual_velocity import MFCoeffs, VehicleParams
from .track import TrackModel


class InfeasibleProfile(ValueError):
    pass


@dataclass
class SpeedLimits:
    v_top: float = 80.0
    a_lat: float = 20.0
    a_accel: float = 5.0
    a_brake: float = 8.0
    smooth: float = 40.0
    v_min: float = 10.0


def speed_profile(track: TrackModel, lim: SpeedLimits, step: float = 1.0) -> CubicSpline:
    """Periodic v(s) respecting lateral, drive and brake limits.

    Curvature caps the speed, forward and backward passes enforce the
    longitudinal limits over two laps to handle the wrap, and a moving
    average over ``smooth`` metres removes acceleration steps.
    """
    n = int(round(track.length / step))
    s = np.linspace(0.0, track.length, n, endpoint=False)
    ds = track.length / n
    k = np.abs(track.curvature(s))
    cap = np.minimum(lim.v_top, np.sqrt(lim.a_lat / np.maximum(k, 1e-9)))
    v = np.tile(cap, 3)
    for i in range(1, len(v)):
        v[i] = min(v[i], math.sqrt(v[i - 1] ** 2 + 2 * lim.a_accel * ds))
    for i in range(len(v) - 2, -1, -1):
        v[i] = min(v[i], math.sqrt(v[i + 1] ** 2 + 2 * lim.a_brake * ds))
    v = v[n : 2 * n]
    if lim.smooth > 0:
        v = uniform_filter1d(v, max(int(lim.smooth / ds), 1), mode="wrap")
    v = np.maximum(v, lim.v_min)
    return CubicSpline(np.append(s, track.length), np.append(v, v[0]), bc_type="periodic")


def knot_profile(track: TrackModel, knots) -> CubicSpline:
    """Periodic v(s) through (s, v) knots given on one lap."""
    knots = np.asarray(knots, dtype=float)
    s, v = knots[:, 0], knots[:, 1]
    if s[0] != 0.0:
        s, v = np.insert(s, 0, 0.0), np.insert(v, 0, v[-1])
    return CubicSpline(np.append(s, track.length), np.append(v, v[0]), bc_type="periodic")


@dataclass
class GroundTruth:
    """Time series sampled on a uniform base grid."""

    t: NDArray
    s: NDArray
    p: NDArray  # nav position (N, 3)
    angles: NDArray  # roll, pitch, yaw (N, 3)
    v_body: NDArray  # (N, 3)
    beta: NDArray
    a_body: NDArray  # specific force (N, 3)
    omega: NDArray  # (N, 3)
    omega_dot: NDArray  # (N, 3)
    wheel: NDArray  # fl, fr, rl, rr rad/s (N, 4)
    steer: NDArray
    torques: NDArray  # brake fl, fr, rl, rr, drive N m (N, 5)
    forces: NDArray  # Fx_f, Fx_r, Fy_f, Fy_r, Fz_f, Fz_r (N, 6)
    slips: NDArray  # sx_f, sx_r, alpha_f, alpha_r (N, 4)
    bank: NDArray
    slope: NDArray
    dt: float
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    def index(self, t) -> NDArray:
        return np.clip(np.rint(np.asarray(t) / self.dt).astype(int), 0, len(self.t) - 1)


def _mf_inverse(force_norm: NDArray, c: MFCoeffs, what: str) -> NDArray:
    """Vectorised inverse of the rising MF branch by bisection."""
    x_peak = _mf_peak_slip(c)
    f_peak = magic_formula(x_peak, c)
    f = np.asarray(force_norm, dtype=float)
    if np.any(np.abs(f) >= f_peak * 0.98):
        worst = float(np.max(np.abs(f)) / f_peak)
        raise InfeasibleProfile(f"{what} force demand at {worst:.0%} of tire peak")
    lo = np.zeros_like(f)
    hi = np.full_like(f, x_peak)
    target = np.abs(f)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        below = magic_formula(mid, c) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return np.sign(f) * 0.5 * (lo + hi)


def _attitude(chi, phi_b, beta):
    """Euler angles of R = Rz(chi) Rx(bank) Rz(-beta)."""
    cc, sc = np.cos(chi), np.sin(chi)
    cp, sp = np.cos(phi_b), np.sin(phi_b)
    cb, sb = np.cos(-beta), np.sin(-beta)
    n = len(chi)
    Rz1 = np.zeros((n, 3, 3))
    Rz1[:, 0, 0], Rz1[:, 0, 1], Rz1[:, 1, 0], Rz1[:, 1, 1], Rz1[:, 2, 2] = cc, -sc, sc, cc, 1.0
    Rx = np.zeros((n, 3, 3))
    Rx[:, 0, 0], Rx[:, 1, 1], Rx[:, 1, 2], Rx[:, 2, 1], Rx[:, 2, 2] = 1.0, cp, -sp, sp, cp
    Rz2 = np.zeros((n, 3, 3))
    Rz2[:, 0, 0], Rz2[:, 0, 1], Rz2[:, 1, 0], Rz2[:, 1, 1], Rz2[:, 2, 2] = cb, -sb, sb, cb, 1.0
    R = Rz1 @ Rx @ Rz2
    roll = np.arctan2(R[:, 2, 1], R[:, 2, 2])
    pitch = -np.arcsin(np.clip(R[:, 2, 0], -1.0, 1.0))
    yaw = np.arctan2(R[:, 1, 0], R[:, 0, 0])
    return np.stack([roll, pitch, yaw], axis=1), R


def simulate_lap(
    track: TrackModel,
    speed: CubicSpline,
    params: VehicleParams,
    dt: float = 1e-3,
    duration: float | None = None,
    s0: float = 0.0,
    brake_bias: float = 0.6,
    g: float = G,
    iterations: int = 8,
) -> GroundTruth:
    """Ground truth on a uniform time grid.

    ``duration`` defaults to one lap. Raises InfeasibleProfile when a tire
    force demand reaches the Magic Formula peak.
    """
    if duration is None:
        sol0 = solve_ivp(lambda t, y: [speed(y[0])], (0, 1e4), [s0], events=_lap_event(s0, track.length), rtol=1e-10)
        duration = float(sol0.t_events[0][0])
    n = int(round(duration / dt)) + 1
    t = np.arange(n) * dt
    sol = solve_ivp(
        lambda _, y: [speed(y[0])], (0.0, t[-1]), [s0], t_eval=t, method="DOP853",
        rtol=1e-12, atol=1e-9, dense_output=True,
    )
    s = sol.y[0]
    v = speed(s)
    if np.any(v <= 0):
        raise InfeasibleProfile("speed profile must stay positive")
    vdot = speed(s, 1) * v

    chi = track.heading(s) + 2.0 * np.pi * np.floor(s / track.length)
    chi = np.unwrap(chi)
    phi_b = track.bank(s)
    slope = track.slope(s)

    # half-step path quantities for RK4
    th = np.arange(2 * n - 1) * (0.5 * dt)
    sh = sol.sol(th)[0] if sol.sol is not None else np.interp(th, t, s)
    path = _path_terms(track, speed, sh, g)
    mf = params.mf_y_r
    beta, beta_dot, beta_ddot = _slip_dynamics(
        path, 0.5 * dt, params.m, params.J_z, params.l_f, params.l_r, params.h_cog, g,
        mf.B, mf.C, mf.D, mf.E,
    )
    beta, beta_dot, beta_ddot = beta[::2], beta_dot[::2], beta_ddot[::2]
    w1, w2, w3, w3_dot = path[2][::2], path[3][::2], path[4][::2], path[5][::2]
    cb, sb = np.cos(beta), np.sin(beta)
    omega = np.stack([cb * w1 - sb * w2, sb * w1 + cb * w2, w3 - beta_dot], axis=1)
    omega_dot = np.gradient(omega, dt, axis=0)
    omega_dot[:, 2] = w3_dot - beta_ddot
    v_b = np.stack([v * cb, v * sb, np.zeros(n)], axis=1)
    vb_dot = np.stack([vdot * cb - v * beta_dot * sb, vdot * sb + v * beta_dot * cb, np.zeros(n)], axis=1)
    angles, R = _attitude(chi, phi_b, beta)
    g_body = np.einsum("nji,j->ni", R, np.array([0.0, 0.0, -g]))
    a_body = vb_dot + np.cross(omega, v_b) - g_body
    ax, ay, az = a_body[:, 0], a_body[:, 1], a_body[:, 2]
    wz, wz_dot = omega[:, 2], omega_dot[:, 2]
    fzf, fzr = axle_normal_loads(params, ax, az)
    m, J = params.m, params.J_z
    l, l_f = params.l, params.l_f
    fyr = (m * ay * l_f - J * wz_dot) / l
    f1 = m * ay - fyr
    a_r = _mf_inverse(fyr / fzr, params.mf_y_r, "rear lateral")
    vx, vy = v * cb, v * sb
    steer = np.arctan((vy + l_f * wz) / vx)
    fxf = np.zeros(n)
    for _ in range(iterations):
        cd, sd = np.cos(steer), np.sin(steer)
        fyf = (f1 - fxf * sd) / cd
        a_f = _mf_inverse(fyf / fzf, params.mf_y_f, "front lateral")
        steer = a_f + np.arctan((vy + l_f * wz) / vx)
        cd, sd = np.cos(steer), np.sin(steer)
        # rear-wheel drive, braking shared by the brake bias
        demand = m * ax + fyf * sd
        fxf = np.where(demand < 0, brake_bias * demand / cd, 0.0)
        fxr = np.where(demand < 0, (1.0 - brake_bias) * demand, demand)
    if np.any(np.abs(steer) >= 0.5):
        raise InfeasibleProfile("steering demand beyond 0.5 rad")
    fyf = (f1 - fxf * np.sin(steer)) / np.cos(steer)

    sx_f = _mf_inverse(fxf / fzf, params.mf_x_f, "front longitudinal")
    sx_r = _mf_inverse(fxr / fzr, params.mf_x_r, "rear longitudinal")
    cd = np.cos(steer)
    v_fa = v * np.cos(steer - beta) + l_f * wz * np.sin(steer)
    half_f = wz * 0.5 * params.b_f * cd
    half_r = wz * 0.5 * params.b_r
    vx = v * np.cos(beta)
    wheel = np.stack(
        [
            (1.0 + sx_f) * (v_fa - half_f) / params.r_dyn_f,
            (1.0 + sx_f) * (v_fa + half_f) / params.r_dyn_f,
            (1.0 + sx_r) * (vx - half_r) / params.r_dyn_r,
            (1.0 + sx_r) * (vx + half_r) / params.r_dyn_r,
        ],
        axis=1,
    )
    brake_f = np.minimum(fxf, 0.0) * params.r_dyn_f
    brake_r = np.minimum(fxr, 0.0) * params.r_dyn_r
    drive = np.maximum(fxr, 0.0) * params.r_dyn_r
    torques = np.stack([0.5 * brake_f, 0.5 * brake_f, 0.5 * brake_r, 0.5 * brake_r, drive], axis=1)

    xy = track.centerline.point(s)
    p = np.concatenate([xy, track.height(s)[:, None]], axis=1)
    return GroundTruth(
        t=t,
        s=s,
        p=p,
        angles=angles,
        v_body=v_b,
        beta=beta,
        a_body=a_body,
        omega=omega,
        omega_dot=omega_dot,
        wheel=wheel,
        steer=steer,
        torques=torques,
        forces=np.stack([fxf, fxr, fyf, fyr, fzf, fzr], axis=1),
        slips=np.stack([sx_f, sx_r, a_f, a_r], axis=1),
        bank=phi_b,
        slope=slope,
        dt=dt,
        meta={"track": track.name, "length": track.length},
    )


def _path_terms(track: TrackModel, speed: CubicSpline, s: NDArray, g: float):
    """Path-fixed kinematics along the centerline at stations s.

    Returns (v, vdot, w1, w2, w3, w3_dot, bank): the road-frame angular rate
    components (bank rate, chi_dot sin(bank), chi_dot cos(bank)) and the
    derivative of the last one.
    """
    v = speed(s)
    dv = speed(s, 1)
    vdot = dv * v
    k = track.curvature(s)
    dk = track.profile.curvature_slope(s)
    phi = track.bank(s)
    phi_dot = track.bank_rate(s) * v
    chi_dot = k * v
    chi_ddot = dk * v * v + k * vdot
    w3 = chi_dot * np.cos(phi)
    w3_dot = chi_ddot * np.cos(phi) - chi_dot * np.sin(phi) * phi_dot
    return v, vdot, phi_dot, chi_dot * np.sin(phi), w3, w3_dot, phi


@njit(cache=True)
def _slip_rhs(b, bd, v, vdot, w2, w3, w3_dot, phi, m, J, l_f, l_r, h, g, B, C, D, E):
    sb, cb = math.sin(b), math.cos(b)
    l = l_f + l_r
    wz = w3 - bd
    ay = vdot * sb + v * cb * w3 + g * math.sin(phi) * cb
    ax = vdot * cb - v * w3 * sb - g * math.sin(phi) * sb
    az = -v * w2 + g * math.cos(phi)
    fzr = m * (az * l_f + ax * h) / l
    a_r = -math.atan((v * sb - l_r * wz) / (v * cb))
    fyr = fzr * _mf(a_r, B, C, D, E)
    return w3_dot - (l_f * m * ay - l * fyr) / J


@njit(cache=True)
def _slip_dynamics(path, h_dt, m, J, l_f, l_r, h, g, B, C, D, E):
    """RK4 on the rear-axle lateral dynamics over a half-step grid.

    State (beta, beta_dot); the yaw balance with the path-fixed lateral
    acceleration leaves a damped second-order system in beta.
    """
    v, vdot, w1, w2, w3, w3_dot, phi = path
    nh = v.shape[0]
    beta = np.zeros(nh)
    bdot = np.zeros(nh)
    bdd = np.zeros(nh)
    dt = 2.0 * h_dt
    b, bd = 0.0, 0.0
    for k in range(0, nh - 2, 2):
        i0, i1, i2 = k, k + 1, k + 2
        k1b = bd
        k1d = _slip_rhs(b, bd, v[i0], vdot[i0], w2[i0], w3[i0], w3_dot[i0], phi[i0], m, J, l_f, l_r, h, g, B, C, D, E)
        k2b = bd + 0.5 * dt * k1d
        k2d = _slip_rhs(b + 0.5 * dt * k1b, k2b, v[i1], vdot[i1], w2[i1], w3[i1], w3_dot[i1], phi[i1], m, J, l_f, l_r, h, g, B, C, D, E)
        k3b = bd + 0.5 * dt * k2d
        k3d = _slip_rhs(b + 0.5 * dt * k2b, k3b, v[i1], vdot[i1], w2[i1], w3[i1], w3_dot[i1], phi[i1], m, J, l_f, l_r, h, g, B, C, D, E)
        k4b = bd + dt * k3d
        k4d = _slip_rhs(b + dt * k3b, k4b, v[i2], vdot[i2], w2[i2], w3[i2], w3_dot[i2], phi[i2], m, J, l_f, l_r, h, g, B, C, D, E)
        beta[i0], bdot[i0], bdd[i0] = b, bd, k1d
        b = b + dt / 6.0 * (k1b + 2 * k2b + 2 * k3b + k4b)
        bd = bd + dt / 6.0 * (k1d + 2 * k2d + 2 * k3d + k4d)
    i = nh - 1
    beta[i], bdot[i] = b, bd
    bdd[i] = _slip_rhs(b, bd, v[i], vdot[i], w2[i], w3[i], w3_dot[i], phi[i], m, J, l_f, l_r, h, g, B, C, D, E)
    return beta, bdot, bdd


def _lap_event(s0, length):
    def ev(_, y):
        return y[0] - (s0 + length)

    ev.terminal = True
    return ev


def stationary_truth(roll: float, pitch: float, duration: float, dt: float = 1e-3, yaw: float = 0.0) -> GroundTruth:
    """A parked vehicle on a tilted plane: zero motion, gravity only."""
    n = int(round(duration / dt)) + 1
    t = np.arange(n) * dt
    sr, cr, sp, cp = math.sin(roll), math.cos(roll), math.sin(pitch), math.cos(pitch)
    # accelerometer reads the reaction to gravity
    a = G * np.array([-sp, sr * cp, cr * cp])
    z3 = np.zeros((n, 3))
    return GroundTruth(
        t=t, s=np.zeros(n), p=z3.copy(), angles=np.tile([roll, pitch, yaw], (n, 1)), v_body=z3.copy(),
        beta=np.zeros(n), a_body=np.tile(a, (n, 1)), omega=z3.copy(), omega_dot=z3.copy(),
        wheel=np.zeros((n, 4)), steer=np.zeros(n), torques=np.zeros((n, 5)), forces=np.zeros((n, 6)),
        slips=np.zeros((n, 4)), bank=np.full(n, roll), slope=np.full(n, pitch), dt=dt, meta={"track": "stationary"},
    )
