"""Unscented side-slip estimator on a reduced (v, beta) state.

Prediction integrates the point-mass speed and side-slip kinematics with
the road angles taken from the EKF. The correction compares front-axle
speed and single-track axle forces from a Magic Formula tire model against
virtual measurements built from wheel speeds, torques and the IMU. An
excitation-dependent measurement covariance hands trust from the wheel
speeds to the tire forces as the vehicle approaches the grip limit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numba import njit
from numpy.typing import ArrayLike, NDArray

from .core_math import G, CovarianceNotPD
from .ekf3d import Frame, MeasurementKind, MeasurementPacket
from .sensors import ActuationSample, ImuSample, WheelSpeeds
from .virtual_velocity import MFCoeffs, VehicleParams

BETA_LIMIT = math.radians(30.0)


class BelowMinSpeed(ValueError):
    """Speed below the UKF's validity threshold."""


class SlipState(NamedTuple):
    v: float
    beta: float


class AxleForces(NamedTuple):
    F_x_FA: float
    F_x_RA: float
    F_y_FA: float
    F_y_RA: float
    F_z_FA: float
    F_z_RA: float


@dataclass
class UkfConfig:
    alpha: float = 0.5
    beta_w: float = 2.0
    kappa: float = 0.0
    v_min: float = 5.0
    # continuous process noise densities for (v, beta)
    q_v: float = 0.5
    q_beta: float = 2e-4
    p0_v: float = 4.0
    p0_beta: float = math.radians(5.0) ** 2
    hold_inflation: float = 1.0
    # adaptive measurement covariance endpoints (standard deviations)
    sigma_wheel_min: float = 0.1
    sigma_wheel_max: float = 2.0
    sigma_force_min: float = 300.0
    sigma_force_max: float = 2000.0
    accel_saturation: float = 8.0
    slip_saturation: float = 0.08
    packet_sigma_floor: float = 0.02

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("sigma spread alpha must lie in (0, 1]")
        if self.v_min <= 0:
            raise ValueError("v_min must be positive")


@dataclass
class UkfEstimate:
    x: NDArray
    P: NDArray
    t: float
    alpha: float = 0.5
    beta_w: float = 2.0
    kappa: float = 0.0

    @property
    def state(self) -> SlipState:
        return SlipState(float(self.x[0]), float(self.x[1]))

    def copy(self) -> "UkfEstimate":
        return UkfEstimate(self.x.copy(), self.P.copy(), self.t, self.alpha, self.beta_w, self.kappa)


# ---------------------------------------------------------------- tire model


@njit(cache=True)
def _mf(x, B, C, D, E):
    bx = B * x
    return D * math.sin(C * math.atan(bx - E * (bx - math.atan(bx))))


def magic_formula(slip, coeffs: MFCoeffs):
    """Normalised tire force ``D sin(C atan(Bx - E(Bx - atan Bx)))``."""
    bx = coeffs.B * np.asarray(slip, dtype=float)
    out = coeffs.D * np.sin(coeffs.C * np.arctan(bx - coeffs.E * (bx - np.arctan(bx))))
    return float(out) if np.ndim(out) == 0 else out


def magic_formula_inverse(force: float, coeffs: MFCoeffs) -> float:
    """Slip on the rising branch producing a normalised force.

    Raises ValueError when the force exceeds the curve's peak.
    """
    from scipy.optimize import brentq

    if force == 0.0:
        return 0.0
    x_peak = _mf_peak_slip(coeffs)
    f_peak = magic_formula(x_peak, coeffs)
    if abs(force) >= f_peak:
        raise ValueError(f"force {force:.4f} beyond tire peak {f_peak:.4f}")
    sgn = math.copysign(1.0, force)
    x = brentq(lambda s: magic_formula(s, coeffs) - abs(force), 0.0, x_peak, xtol=1e-14)
    return sgn * x


def _mf_peak_slip(coeffs: MFCoeffs) -> float:
    from scipy.optimize import brentq

    # C atan(...) reaches pi/2 at the peak
    target = math.tan(math.pi / (2.0 * coeffs.C))

    def inner(s):
        bx = coeffs.B * s
        return bx - coeffs.E * (bx - math.atan(bx)) - target

    hi = 1.0
    while inner(hi) < 0:
        hi *= 2.0
    return brentq(inner, 0.0, hi, xtol=1e-14)


def _mf_table(params: VehicleParams) -> NDArray:
    rows = [params.mf_x_f, params.mf_x_r, params.mf_y_f, params.mf_y_r]
    return np.array([[c.B, c.C, c.D, c.E] for c in rows])


def axle_normal_loads(params: VehicleParams, a_x: float = 0.0, a_z: float = G) -> tuple[float, float]:
    """Static axle loads scaled by the measured vertical specific force.

    Longitudinal load transfer ``m a_x h_cog / l`` moves load rearward
    under acceleration. ``a_z`` defaults to g (level, unaccelerated).
    """
    l = params.l
    transfer = params.m * a_x * params.h_cog / l
    fzf = params.m * a_z * params.l_r / l - transfer
    fzr = params.m * a_z * params.l_f / l + transfer
    return fzf, fzr


# ---------------------------------------------------------------- UKF kernels


@njit(cache=True)
def _weights(n, alpha, beta_w, kappa):
    lam = alpha * alpha * (n + kappa) - n
    wm = np.full(2 * n + 1, 0.5 / (n + lam))
    wc = wm.copy()
    wm[0] = lam / (n + lam)
    wc[0] = wm[0] + 1.0 - alpha * alpha + beta_w
    return wm, wc, n + lam


@njit(cache=True)
def _sigma_points(x, P, alpha, beta_w, kappa):
    n = x.shape[0]
    wm, wc, c = _weights(n, alpha, beta_w, kappa)
    if n == 2:
        # closed form, the LAPACK call dominates at this size
        a = c * P[0, 0]
        if not a > 0.0:
            raise np.linalg.LinAlgError("Matrix is not positive definite")
        L = np.zeros((2, 2))
        L[0, 0] = math.sqrt(a)
        L[1, 0] = c * P[1, 0] / L[0, 0]
        d = c * P[1, 1] - L[1, 0] * L[1, 0]
        if not d > 0.0:
            raise np.linalg.LinAlgError("Matrix is not positive definite")
        L[1, 1] = math.sqrt(d)
    else:
        L = np.linalg.cholesky(c * P)
    X = np.empty((2 * n + 1, n))
    X[0] = x
    for i in range(n):
        X[1 + i] = x + L[:, i]
        X[1 + n + i] = x - L[:, i]
    return X, wm, wc


@njit(cache=True)
def _slip_rates(v, beta, ax, ay, wz, roll, pitch, g):
    lon = ax + g * math.sin(pitch)
    lat = ay - g * math.sin(roll) * math.cos(pitch)
    sb, cb = math.sin(beta), math.cos(beta)
    vdot = cb * lon + sb * lat
    bdot = -sb * lon / v + cb * lat / v - wz
    return vdot, bdot


@njit(cache=True)
def _predict_kernel(x, P, ax, ay, wz, roll, pitch, g, dt, q, alpha, beta_w, kappa):
    X, wm, wc = _sigma_points(x, P, alpha, beta_w, kappa)
    m = X.shape[0]
    for i in range(m):
        vd, bd = _slip_rates(X[i, 0], X[i, 1], ax, ay, wz, roll, pitch, g)
        X[i, 0] += dt * vd
        X[i, 1] += dt * bd
    xm = np.zeros(2)
    for i in range(m):
        xm[0] += wm[i] * X[i, 0]
        xm[1] += wm[i] * X[i, 1]
    Pn = np.zeros((2, 2))
    for i in range(m):
        d0 = X[i, 0] - xm[0]
        d1 = X[i, 1] - xm[1]
        Pn[0, 0] += wc[i] * d0 * d0
        Pn[0, 1] += wc[i] * d0 * d1
        Pn[1, 1] += wc[i] * d1 * d1
    Pn[1, 0] = Pn[0, 1]
    Pn[0, 0] += q[0] * dt
    Pn[1, 1] += q[1] * dt
    Pn = 0.5 * (Pn + Pn.T)
    return xm, Pn


@njit(cache=True)
def _h_kernel(v, beta, inp, mf):
    """Six-row measurement model for one state.

    inp = (wz, steer, v_wheel_front, v_wheel_rear, l_f, l_r, fz_f, fz_r, v_min)
    """
    wz, steer, vwf, vwr = inp[0], inp[1], inp[2], inp[3]
    l_f, l_r, fzf, fzr, v_min = inp[4], inp[5], inp[6], inp[7], inp[8]
    y = np.empty(6)
    v_fa = v * math.cos(steer - beta) + l_f * wz * math.sin(steer)
    y[0] = v_fa
    y[1] = v_fa
    v_ra = v * math.cos(beta)
    sx_f = (vwf - v_fa) / max(v_fa, v_min)
    sx_r = (vwr - v_ra) / max(v_ra, v_min)
    vx = v * math.cos(beta)
    vy = v * math.sin(beta)
    vx_s = max(vx, v_min)
    a_f = steer - math.atan((vy + l_f * wz) / vx_s)
    a_r = -math.atan((vy - l_r * wz) / vx_s)
    y[2] = fzf * _mf(sx_f, mf[0, 0], mf[0, 1], mf[0, 2], mf[0, 3])
    y[3] = fzr * _mf(sx_r, mf[1, 0], mf[1, 1], mf[1, 2], mf[1, 3])
    y[4] = fzf * _mf(a_f, mf[2, 0], mf[2, 1], mf[2, 2], mf[2, 3])
    y[5] = fzr * _mf(a_r, mf[3, 0], mf[3, 1], mf[3, 2], mf[3, 3])
    return y


@njit(cache=True)
def _update_generic(x, P, z, R, Y, X, wm, wc):
    m = X.shape[0]
    n = x.shape[0]
    k = Y.shape[1]
    ym = np.zeros(k)
    for i in range(m):
        for a in range(k):
            ym[a] += wm[i] * Y[i, a]
    S = 0.5 * (R + R.T)
    C = np.zeros((n, k))
    dy = np.empty(k)
    for i in range(m):
        for a in range(k):
            dy[a] = Y[i, a] - ym[a]
        for a in range(k):
            wa = wc[i] * dy[a]
            for b in range(a, k):
                S[a, b] += wa * dy[b]
            for j in range(n):
                C[j, a] += wa * (X[i, j] - x[j])
    for a in range(k):
        for b in range(a + 1, k):
            S[b, a] = S[a, b]
    K = np.linalg.solve(S, C.T).T
    xn = x + K @ (z - ym)
    Pn = P - K @ C.T  # K S K^T with K = C S^-1
    return xn, 0.5 * (Pn + Pn.T)


@njit(cache=True)
def _update_kernel(x, P, z, R, inp, mf, alpha, beta_w, kappa):
    X, wm, wc = _sigma_points(x, P, alpha, beta_w, kappa)
    Y = np.empty((X.shape[0], 6))
    for i in range(X.shape[0]):
        Y[i] = _h_kernel(X[i, 0], X[i, 1], inp, mf)
    return _update_generic(x, P, z, R, Y, X, wm, wc)


# ---------------------------------------------------------------- python API


def sigma_points(x: ArrayLike, P: ArrayLike, alpha=0.5, beta_w=2.0, kappa=0.0):
    """Scaled sigma points and their mean/covariance weights."""
    return _sigma_points(np.asarray(x, dtype=float), np.asarray(P, dtype=float), alpha, beta_w, kappa)


def recombine(X: NDArray, wm: NDArray, wc: NDArray) -> tuple[NDArray, NDArray]:
    mean = wm @ X
    d = X - mean
    return mean, (wc[:, None] * d).T @ d


def initial_estimate(v: float, t: float, cfg: UkfConfig | None = None, beta: float = 0.0) -> UkfEstimate:
    cfg = cfg or UkfConfig()
    return UkfEstimate(
        np.array([v, beta]), np.diag([cfg.p0_v, cfg.p0_beta]), t, cfg.alpha, cfg.beta_w, cfg.kappa
    )


def ukf_predict(
    est: UkfEstimate, u: ImuSample, road: tuple[float, float], dt: float, cfg: UkfConfig | None = None, g: float = G
) -> UkfEstimate:
    """Propagate (v, beta) over one step.

    ``road`` is (roll, pitch) of the road surface from the EKF.
    """
    cfg = cfg or UkfConfig()
    if not 0.0 < dt <= 0.02:
        raise ValueError(f"dt={dt} outside (0, 0.02]")
    if est.x[0] <= cfg.v_min:
        raise BelowMinSpeed(f"speed {est.x[0]:.2f} m/s below {cfg.v_min} m/s")
    x, P = _predict_kernel(
        est.x, est.P, float(u.accel[0]), float(u.accel[1]), float(u.gyro[2]),
        float(road[0]), float(road[1]), g, dt, np.array([cfg.q_v, cfg.q_beta]),
        est.alpha, est.beta_w, est.kappa,
    )
    x[1] = min(max(x[1], -BETA_LIMIT), BETA_LIMIT)
    x[0] = max(x[0], 0.0)
    return UkfEstimate(x, P, est.t + dt, est.alpha, est.beta_w, est.kappa)


def hold(est: UkfEstimate, dt: float, cfg: UkfConfig | None = None) -> UkfEstimate:
    """Below v_min: keep the state, grow the covariance."""
    cfg = cfg or UkfConfig()
    P = est.P + cfg.hold_inflation * np.diag([cfg.q_v, cfg.q_beta]) * dt
    P = np.minimum(P, np.diag([cfg.p0_v, cfg.p0_beta]) * 100.0) if np.all(np.diag(P) > 0) else P
    return UkfEstimate(est.x.copy(), P, est.t + dt, est.alpha, est.beta_w, est.kappa)


@dataclass
class MeasurementContext:
    """Inputs of the measurement model besides the state."""

    yaw_rate: float
    steer: float
    v_wheel_front: float
    v_wheel_rear: float
    fz_front: float
    fz_rear: float

    @classmethod
    def build(cls, u: ImuSample, act: ActuationSample, w: WheelSpeeds, params: VehicleParams) -> "MeasurementContext":
        fzf, fzr = axle_normal_loads(params, float(u.accel[0]), float(u.accel[2]))
        return cls(
            float(u.gyro[2]),
            act.steer,
            0.5 * (w.fl + w.fr) * params.r_dyn_f,
            0.5 * (w.rl + w.rr) * params.r_dyn_r,
            fzf,
            fzr,
        )

    def packed(self, params: VehicleParams, v_min: float) -> NDArray:
        return np.array([
            self.yaw_rate, self.steer, self.v_wheel_front, self.v_wheel_rear,
            params.l_f, params.l_r, self.fz_front, self.fz_rear, v_min,
        ])


def measurement_model_h(
    state: SlipState, ctx: MeasurementContext, params: VehicleParams, v_min: float = 5.0
) -> NDArray:
    """(v_FA, v_FA, Fx_front, Fx_rear, Fy_front, Fy_rear) predicted from the state."""
    return _h_kernel(float(state[0]), float(state[1]), ctx.packed(params, v_min), _mf_table(params))


def virtual_measurements_g(
    w: WheelSpeeds, act: ActuationSample, u: ImuSample, yaw_accel: float, params: VehicleParams
) -> NDArray:
    """Measured counterparts of the model outputs.

    Wheel rows correct each front wheel to the axle midpoint. Longitudinal
    forces are wheel torques over the dynamic radius. Lateral forces follow
    from the lateral and yaw balance of the single-track model; the rear row
    is the yaw-moment-consistent ``(a_y l_f m - J_z dw_z/dt) / l``.
    """
    wz = float(u.gyro[2])
    ay = float(u.accel[1])
    cd = math.cos(act.steer)
    half = wz * 0.5 * params.b_f * cd
    fxf = (act.brake_fl + act.brake_fr) / params.r_dyn_f
    fxr = (act.brake_rl + act.brake_rr + act.drive) / params.r_dyn_r
    fyf = (ay * params.l_r * params.m + yaw_accel * params.J_z) / (params.l * cd) - math.tan(act.steer) * fxf
    fyr = (ay * params.l_f * params.m - yaw_accel * params.J_z) / params.l
    return np.array([
        w.fl * params.r_dyn_f + half,
        w.fr * params.r_dyn_f - half,
        fxf,
        fxr,
        fyf,
        fyr,
    ])


def excitation(u: ImuSample, cfg: UkfConfig, slip: float = 0.0) -> float:
    """Scalar in [0, 1]: 0 at rest or straight cruising, 1 at saturation."""
    lam = math.hypot(float(u.accel[0]), float(u.accel[1])) / cfg.accel_saturation
    lam = max(lam, abs(slip) / cfg.slip_saturation)
    return min(max(lam, 0.0), 1.0)


def adaptive_R(u: ImuSample, cfg: UkfConfig | None = None, slip: float = 0.0) -> NDArray:
    """Measurement covariance blending wheel-speed and force rows.

    Variances interpolate linearly in the excitation scalar: wheel rows go
    from their minimum to their maximum, force rows the other way.
    """
    cfg = cfg or UkfConfig()
    return _blend_r(
        excitation(u, cfg, slip),
        cfg.sigma_wheel_min**2, cfg.sigma_wheel_max**2, cfg.sigma_force_min**2, cfg.sigma_force_max**2,
    )


@njit(cache=True)
def _blend_r(lam, w_min, w_max, f_min, f_max):
    R = np.zeros((6, 6))
    rw = w_min + lam * (w_max - w_min)
    rf = f_max + lam * (f_min - f_max)
    R[0, 0] = R[1, 1] = rw
    R[2, 2] = R[3, 3] = R[4, 4] = R[5, 5] = rf
    return R


def ukf_update(
    est: UkfEstimate,
    z: ArrayLike,
    R: ArrayLike,
    ctx: MeasurementContext | None = None,
    params: VehicleParams | None = None,
    cfg: UkfConfig | None = None,
    h=None,
) -> UkfEstimate:
    """Unscented correction.

    With ``h`` given it is used as the measurement function over the sigma
    points (``h(x) -> vector``); otherwise the tire model is evaluated.
    Raises CovarianceNotPD when the posterior loses definiteness.
    """
    cfg = cfg or UkfConfig()
    z = np.asarray(z, dtype=float)
    R = np.asarray(R, dtype=float)
    if h is None:
        params = params or VehicleParams()
        return _tire_update(est, z, R, ctx.packed(params, cfg.v_min), _mf_table(params))
    X, wm, wc = _sigma_points(est.x, est.P, est.alpha, est.beta_w, est.kappa)
    Y = np.array([np.atleast_1d(h(xi)) for xi in X], dtype=float)
    x, P = _update_generic(est.x, est.P, z, np.atleast_2d(R), Y, X, wm, wc)
    return _finish_update(est, x, P)


def _tire_update(est: UkfEstimate, z: NDArray, R: NDArray, packed: NDArray, mf: NDArray) -> UkfEstimate:
    x, P = _update_kernel(est.x, est.P, z, R, packed, mf, est.alpha, est.beta_w, est.kappa)
    return _finish_update(est, x, P)


@njit(cache=True)
def _pd2(x, P):
    """Clamp x in place; True when x is finite and P finite and PD."""
    for v in x:
        if not np.isfinite(v):
            return False
    for v in P.flat:
        if not np.isfinite(v):
            return False
    x[1] = min(max(x[1], -BETA_LIMIT), BETA_LIMIT)
    x[0] = max(x[0], 0.0)
    return P[0, 0] > 0.0 and P[0, 0] * P[1, 1] - P[0, 1] * P[1, 0] > 0.0


def _finish_update(est: UkfEstimate, x: NDArray, P: NDArray) -> UkfEstimate:
    if not _pd2(x, P):
        raise CovarianceNotPD("UKF posterior covariance is not positive-definite")
    return UkfEstimate(x, P, est.t, est.alpha, est.beta_w, est.kappa)


def velocity_packet(est: UkfEstimate, cfg: UkfConfig | None = None) -> MeasurementPacket:
    """Body velocity (v cos beta, v sin beta) with first-order covariance."""
    cfg = cfg or UkfConfig()
    z, R = _polar_to_body(est.x, est.P, cfg.packet_sigma_floor**2)
    return MeasurementPacket(MeasurementKind.VEL_VIRTUAL, z, R, est.t, Frame.BODY)


@njit(cache=True)
def _polar_to_body(x, P, floor):
    v, beta = x[0], x[1]
    cb, sb = math.cos(beta), math.sin(beta)
    pvv, pvb, pbb = P[0, 0], P[0, 1], P[1, 1]
    # J P J^T with J = [[cb, -v sb], [sb, v cb]]
    R = np.empty((2, 2))
    R[0, 0] = cb * cb * pvv - 2.0 * v * cb * sb * pvb + v * v * sb * sb * pbb + floor
    R[1, 1] = sb * sb * pvv + 2.0 * v * cb * sb * pvb + v * v * cb * cb * pbb + floor
    R[0, 1] = R[1, 0] = cb * sb * pvv + v * (cb * cb - sb * sb) * pvb - v * v * cb * sb * pbb
    z = np.empty(2)
    z[0] = v * cb
    z[1] = v * sb
    return z, R


@dataclass
class UkfEvent:
    t: float
    kind: str


@dataclass
class SideslipUkf:
    """Stateful wrapper running predict/update in lock-step with the EKF."""

    params: VehicleParams = field(default_factory=VehicleParams)
    cfg: UkfConfig = field(default_factory=UkfConfig)
    g: float = G
    est: UkfEstimate | None = None
    events: list = field(default_factory=list)

    def __post_init__(self):
        self._mf = _mf_table(self.params)

    def initialize(self, v: float, t: float, beta: float = 0.0) -> None:
        self.est = initial_estimate(v, t, self.cfg, beta)

    def step(
        self,
        u: ImuSample,
        road: tuple[float, float],
        dt: float,
        w: WheelSpeeds | None,
        act: ActuationSample | None,
        yaw_accel: float,
    ) -> MeasurementPacket | None:
        if self.est is None:
            return None
        try:
            self.est = ukf_predict(self.est, u, road, dt, self.cfg, self.g)
        except np.linalg.LinAlgError:
            self.events.append(UkfEvent(self.est.t, "reset"))
            self.initialize(self.est.x[0], self.est.t + dt)
            return None
        except BelowMinSpeed:
            self.est = hold(self.est, dt, self.cfg)
            if w is not None:
                # re-seed speed from the wheels so the filter can restart
                self.est.x[0] = 0.5 * (w.fl + w.fr) * self.params.r_dyn_f
            return None
        if w is None or act is None:
            return velocity_packet(self.est, self.cfg)
        ctx = MeasurementContext.build(u, act, w, self.params)
        z = virtual_measurements_g(w, act, u, yaw_accel, self.params)
        R = adaptive_R(u, self.cfg)
        try:
            self.est = _tire_update(self.est, z, R, ctx.packed(self.params, self.cfg.v_min), self._mf)
        except (CovarianceNotPD, np.linalg.LinAlgError):
            self.events.append(UkfEvent(self.est.t, "reset"))
            self.initialize(max(ctx.v_wheel_front, 0.0), self.est.t)
            return None
        return velocity_packet(self.est, self.cfg)
