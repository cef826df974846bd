"""Point-mass EKF with position, Euler angles and body velocity.

State layout ``x = (px, py, pz, roll, pitch, yaw, vx, vy, vz)``; the input
is the COG-referenced IMU ``u = (wx, wy, wz, ax, ay, az)``.

Velocity follows the body-frame point-mass kinematics with the gravity
components removed through roll and pitch, the angles follow the ZYX rate
kinematics and position is the body velocity rotated into the nav frame.
The planar modes freeze roll, pitch, vertical velocity and height.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum, IntEnum

import numpy as np
from numba import njit
from numpy.typing import NDArray

from .core_math import G, GIMBAL_MARGIN, CovarianceNotPD, EulerAngles, GimbalProximity, wrap_angle
from .sensors import GnssFix, ImuSample

NX = 9
IP, IA, IV = slice(0, 3), slice(3, 6), slice(6, 9)
ROLL, PITCH, YAW = 3, 4, 5
TWO_PI = 2.0 * math.pi
MAX_DT = 0.02
MAX_SPEED = 150.0


class NonFiniteState(FloatingPointError):
    pass


class InnovationNonFinite(FloatingPointError):
    pass


class EstimatorMode(IntEnum):
    FULL_3D = 0
    PLANAR = 1
    PLANAR_WITH_BANK_MAP = 2
    THREED_WITH_ANGLE_MAP = 3

    @property
    def planar(self) -> bool:
        return self in (EstimatorMode.PLANAR, EstimatorMode.PLANAR_WITH_BANK_MAP)

    @property
    def needs_track(self) -> bool:
        return self in (EstimatorMode.PLANAR_WITH_BANK_MAP, EstimatorMode.THREED_WITH_ANGLE_MAP)


class MeasurementKind(Enum):
    POSITION = "position"
    HEADING = "heading"
    REF_ANGLES = "ref_angles"
    VEL_VIRTUAL = "vel_virtual"


class Frame(Enum):
    NAV = "nav"
    BODY = "body"


@dataclass
class VehicleState:
    p: NDArray
    angles: EulerAngles
    v: NDArray

    def to_vector(self) -> NDArray:
        return np.concatenate([self.p, np.asarray(self.angles, dtype=float), self.v])

    @classmethod
    def from_vector(cls, x: NDArray) -> "VehicleState":
        return cls(x[IP].copy(), EulerAngles(*map(float, x[IA])), x[IV].copy())


@dataclass
class EkfEstimate:
    x: NDArray
    P: NDArray
    t: float

    @property
    def state(self) -> VehicleState:
        return VehicleState.from_vector(self.x)

    def copy(self) -> "EkfEstimate":
        return EkfEstimate(self.x.copy(), self.P.copy(), self.t)


_PACKET_DIMS = {
    MeasurementKind.POSITION: (2, 3),
    MeasurementKind.HEADING: (1,),
    MeasurementKind.REF_ANGLES: (2,),
    MeasurementKind.VEL_VIRTUAL: (2, 3),
}


@dataclass
class MeasurementPacket:
    kind: MeasurementKind
    value: NDArray
    R: NDArray
    t: float
    frame: Frame = Frame.NAV

    def __post_init__(self):
        self.value = np.atleast_1d(np.asarray(self.value, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        m = len(self.value)
        if self.R.shape != (m, m):
            raise ValueError(f"R shape {self.R.shape} does not match value dimension {m}")
        expected = _PACKET_DIMS[self.kind]
        if m not in expected:
            raise ValueError(f"{self.kind.value} packet needs dimension in {expected}, got {m}")


@dataclass
class EkfConfig:
    mode: EstimatorMode = EstimatorMode.FULL_3D
    integrator: str = "midpoint"
    g: float = G
    # continuous-time process noise densities
    q_pos: float = 1e-4
    q_rollpitch: float = 5e-8
    q_yaw: float = 5e-8
    q_vel: float = 0.5
    q_vel_z: float = 0.05
    p_ceiling: float = 1e6
    init_pos_var: float = 10.0
    init_ang_var: float = math.radians(10.0) ** 2
    init_vel_var: float = 25.0
    init_vel_var_lat: float = 1.0  # v_y, v_z: the car starts on the road

    def q_diag(self) -> NDArray:
        key = (self.mode, self.q_pos, self.q_rollpitch, self.q_yaw, self.q_vel, self.q_vel_z)
        if getattr(self, "_q_key", None) != key:
            self._q_key, self._q = key, self._build_q()
        return self._q

    def _build_q(self) -> NDArray:
        q = np.array(
            [self.q_pos] * 3
            + [self.q_rollpitch, self.q_rollpitch, self.q_yaw]
            + [self.q_vel, self.q_vel, self.q_vel_z]
        )
        if self.mode.planar:
            q[[2, ROLL, PITCH, 8]] = 0.0
        return q


# ---------------------------------------------------------------- kernels


@njit(cache=True)
def _rot(roll, pitch, yaw):
    sr, cr = math.sin(roll), math.cos(roll)
    sp, cp = math.sin(pitch), math.cos(pitch)
    sy, cy = math.sin(yaw), math.cos(yaw)
    R = np.empty((3, 3))
    R[0, 0] = cy * cp
    R[0, 1] = cy * sp * sr - sy * cr
    R[0, 2] = cy * sp * cr + sy * sr
    R[1, 0] = sy * cp
    R[1, 1] = sy * sp * sr + cy * cr
    R[1, 2] = sy * sp * cr - cy * sr
    R[2, 0] = -sp
    R[2, 1] = cp * sr
    R[2, 2] = cp * cr
    return R


@njit(cache=True)
def _rot_partials(roll, pitch, yaw):
    """dR/droll, dR/dpitch, dR/dyaw."""
    sr, cr = math.sin(roll), math.cos(roll)
    sp, cp = math.sin(pitch), math.cos(pitch)
    sy, cy = math.sin(yaw), math.cos(yaw)
    dr = np.zeros((3, 3))
    dr[0, 1] = cy * sp * cr + sy * sr
    dr[0, 2] = -cy * sp * sr + sy * cr
    dr[1, 1] = sy * sp * cr - cy * sr
    dr[1, 2] = -sy * sp * sr - cy * cr
    dr[2, 1] = cp * cr
    dr[2, 2] = -cp * sr
    dp = np.zeros((3, 3))
    dp[0, 0] = -cy * sp
    dp[0, 1] = cy * cp * sr
    dp[0, 2] = cy * cp * cr
    dp[1, 0] = -sy * sp
    dp[1, 1] = sy * cp * sr
    dp[1, 2] = sy * cp * cr
    dp[2, 0] = -cp
    dp[2, 1] = -sp * sr
    dp[2, 2] = -sp * cr
    dy = np.zeros((3, 3))
    dy[0, 0] = -sy * cp
    dy[0, 1] = -sy * sp * sr - cy * cr
    dy[0, 2] = -sy * sp * cr + cy * sr
    dy[1, 0] = cy * cp
    dy[1, 1] = cy * sp * sr - sy * cr
    dy[1, 2] = cy * sp * cr + sy * sr
    return dr, dp, dy


@njit(cache=True)
def _deriv(x, u, planar, bank, g):
    """Continuous dynamics f(x, u) and its Jacobian df/dx."""
    f = np.zeros(9)
    A = np.zeros((9, 9))
    wx, wy, wz = u[0], u[1], u[2]
    ax, ay, az = u[3], u[4], u[5]
    roll, pitch, yaw = x[3], x[4], x[5]
    vx, vy, vz = x[6], x[7], x[8]
    if planar:
        cy, sy = math.cos(yaw), math.sin(yaw)
        f[0] = cy * vx - sy * vy
        f[1] = sy * vx + cy * vy
        # heading rate on a plane tilted by the map bank; plain w_z when flat
        f[5] = math.sin(bank) * wy + math.cos(bank) * wz
        f[6] = ax + wz * vy
        f[7] = ay - wz * vx - g * math.sin(bank)
        A[0, 5] = -sy * vx - cy * vy
        A[1, 5] = cy * vx - sy * vy
        A[0, 6] = cy
        A[0, 7] = -sy
        A[1, 6] = sy
        A[1, 7] = cy
        A[6, 7] = wz
        A[7, 6] = -wz
        return f, A
    R = _rot(roll, pitch, yaw)
    dr, dp, dy = _rot_partials(roll, pitch, yaw)
    for i in range(3):
        f[i] = R[i, 0] * vx + R[i, 1] * vy + R[i, 2] * vz
        A[i, 3] = dr[i, 0] * vx + dr[i, 1] * vy + dr[i, 2] * vz
        A[i, 4] = dp[i, 0] * vx + dp[i, 1] * vy + dp[i, 2] * vz
        A[i, 5] = dy[i, 0] * vx + dy[i, 1] * vy + dy[i, 2] * vz
        for j in range(3):
            A[i, 6 + j] = R[i, j]
    sr, cr = math.sin(roll), math.cos(roll)
    sp, cp = math.sin(pitch), math.cos(pitch)
    tp = sp / cp
    sec = 1.0 / cp
    q = sr * wy + cr * wz
    f[3] = wx + tp * q
    f[4] = cr * wy - sr * wz
    f[5] = sec * q
    dq = cr * wy - sr * wz
    A[3, 3] = tp * dq
    A[3, 4] = sec * sec * q
    A[4, 3] = -sr * wy - cr * wz
    A[5, 3] = sec * dq
    A[5, 4] = sec * tp * q
    # v' = -w x v + a + g_body
    f[6] = -(wy * vz - wz * vy) + ax + g * sp
    f[7] = -(wz * vx - wx * vz) + ay - g * sr * cp
    f[8] = -(wx * vy - wy * vx) + az - g * cr * cp
    A[6, 7] = wz
    A[6, 8] = -wy
    A[7, 6] = -wz
    A[7, 8] = wx
    A[8, 6] = wy
    A[8, 7] = -wx
    A[6, 4] = g * cp
    A[7, 3] = -g * cr * cp
    A[7, 4] = g * sr * sp
    A[8, 3] = g * sr * cp
    A[8, 4] = g * cr * sp
    return f, A


@njit(cache=True)
def _transition(x, u, dt, planar, bank, g, midpoint):
    """Discrete transition and its Jacobian."""
    f1, A1 = _deriv(x, u, planar, bank, g)
    I = np.eye(9)
    if not midpoint:
        xn = x + dt * f1
        F = I + dt * A1
    else:
        xm = x + 0.5 * dt * f1
        f2, A2 = _deriv(xm, u, planar, bank, g)
        xn = x + dt * f2
        F = I + dt * (A2 @ (I + 0.5 * dt * A1))
    return xn, F


@njit(cache=True)
def _wrap_nb(a):
    w = a - TWO_PI * math.floor(a / TWO_PI + 0.5)
    return w + TWO_PI if w <= -math.pi else w


@njit(cache=True)
def _finish(x, P):
    """Wrap roll and yaw in place; True when x and P are finite."""
    for v in x.flat:
        if not math.isfinite(v):
            return False
    for v in P.flat:
        if not math.isfinite(v):
            return False
    x[ROLL] = _wrap_nb(x[ROLL])
    x[YAW] = _wrap_nb(x[YAW])
    return True


@njit(cache=True)
def _predict_kernel(x, P, u, dt, planar, bank, g, midpoint, qdiag, ceiling):
    xn, F = _transition(x, u, dt, planar, bank, g, midpoint)
    Pn = F @ P @ F.T
    for i in range(9):
        Pn[i, i] += qdiag[i] * dt
    Pn = 0.5 * (Pn + Pn.T)
    ok = _finish(xn, Pn)
    for i in range(9):
        Pn[i, i] = min(Pn[i, i], ceiling)
    return xn, Pn, ok


@njit(cache=True)
def _update_kernel(x, P, y, H, R):
    """Joseph-form correction. Returns (x, P, S, ok)."""
    PHt = P @ H.T
    S = H @ PHt + R
    S = 0.5 * (S + S.T)
    m = S.shape[0]
    # Cholesky as the PD test on S
    L = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1):
            acc = S[i, j]
            for k in range(j):
                acc -= L[i, k] * L[j, k]
            if i == j:
                if acc <= 0.0:
                    return x, P, S, False
                L[i, i] = math.sqrt(acc)
            else:
                L[i, j] = acc / L[j, j]
    K = np.linalg.solve(S, PHt.T).T
    xn = x + K @ y
    IKH = np.eye(P.shape[0]) - K @ H
    Pn = IKH @ P @ IKH.T + K @ R @ K.T
    Pn = 0.5 * (Pn + Pn.T)
    _finish(xn, Pn)
    return xn, Pn, S, True


# ---------------------------------------------------------------- python API


def _wrap(a: float) -> float:
    w = math.remainder(a, 2.0 * math.pi)
    return math.pi if w == -math.pi else w


def _check_pitch(pitch: float) -> None:
    if abs(pitch) >= math.pi / 2 - GIMBAL_MARGIN:
        raise GimbalProximity(f"pitch {pitch:.6f} rad at gimbal lock")


def transition(x: NDArray, u: NDArray, dt: float, cfg: EkfConfig, bank: float = 0.0):
    """Discrete state transition and Jacobian (exposed for verification)."""
    return _transition(
        np.asarray(x, dtype=float), np.asarray(u, dtype=float), float(dt),
        cfg.mode.planar, float(bank), cfg.g, cfg.integrator == "midpoint",
    )


def imu_vector(u: ImuSample) -> NDArray:
    return np.concatenate([u.gyro, u.accel])


def predict(
    est: EkfEstimate, u: ImuSample, dt: float, cfg: EkfConfig | None = None, bank: float = 0.0
) -> EkfEstimate:
    """Propagate the estimate over one IMU interval.

    ``bank`` is the map bank angle used by PLANAR_WITH_BANK_MAP.
    """
    cfg = cfg or EkfConfig()
    if not 0.0 < dt <= MAX_DT:
        raise ValueError(f"dt={dt} outside (0, {MAX_DT}]")
    if not cfg.mode.planar:
        _check_pitch(est.x[PITCH])
    x, P, ok = _predict_kernel(
        est.x, est.P, imu_vector(u), dt, cfg.mode.planar,
        bank if cfg.mode == EstimatorMode.PLANAR_WITH_BANK_MAP else 0.0,
        cfg.g, cfg.integrator == "midpoint", cfg.q_diag(), cfg.p_ceiling,
    )
    if not ok:
        raise NonFiniteState(f"non-finite state after predict at t={est.t + dt:.3f}")
    if not cfg.mode.planar:
        _check_pitch(x[PITCH])
    return EkfEstimate(x, P, est.t + dt)


def _selector(rows: list[int]) -> NDArray:
    H = np.zeros((len(rows), NX))
    H[np.arange(len(rows)), rows] = 1.0
    return H


_H = {
    (MeasurementKind.POSITION, 3): _selector([0, 1, 2]),
    (MeasurementKind.POSITION, 2): _selector([0, 1]),
    (MeasurementKind.HEADING, 1): _selector([YAW]),
    (MeasurementKind.REF_ANGLES, 2): _selector([ROLL, PITCH]),
    (MeasurementKind.VEL_VIRTUAL, 2): _selector([6, 7]),
    (MeasurementKind.VEL_VIRTUAL, 3): _selector([6, 7, 8]),
}
_ANGLE_ROWS = {MeasurementKind.HEADING: [0], MeasurementKind.REF_ANGLES: [0, 1]}


def measurement_model(est: EkfEstimate, m: MeasurementPacket) -> tuple[NDArray, NDArray]:
    """Predicted measurement and Jacobian for a packet."""
    if m.kind == MeasurementKind.POSITION and m.frame != Frame.NAV:
        raise ValueError("position packets must be in the nav frame")
    if m.kind == MeasurementKind.VEL_VIRTUAL and m.frame != Frame.BODY:
        raise ValueError("virtual velocity packets must be in the body frame")
    H = _H[(m.kind, len(m.value))]
    return H @ est.x, H


def _residual(est, m):
    h, H = measurement_model(est, m)
    y = m.value - h
    for i in _ANGLE_ROWS.get(m.kind, ()):
        y[i] = _wrap(y[i])
    return y, H


def innovation(est: EkfEstimate, m: MeasurementPacket) -> tuple[NDArray, NDArray, NDArray]:
    """Innovation, Jacobian and innovation covariance of a packet."""
    y, H = _residual(est, m)
    S = H @ est.P @ H.T + m.R
    return y, H, S


def update(est: EkfEstimate, m: MeasurementPacket, innovation_override: NDArray | None = None) -> EkfEstimate:
    """EKF correction with one measurement packet.

    ``innovation_override`` replaces the raw innovation, used by the outlier
    gate to apply a clamped residual.
    """
    if abs(m.t - est.t) > MAX_DT + 1e-9:
        raise ValueError(f"packet at t={m.t:.4f} not within one step of estimate t={est.t:.4f}")
    if innovation_override is not None:
        _, H = measurement_model(est, m)
        y = np.asarray(innovation_override, dtype=float)
    else:
        y, H = _residual(est, m)
    if not math.isfinite(y.sum()):
        raise InnovationNonFinite(f"{m.kind.value} innovation is not finite")
    x, P, _, ok = _update_kernel(est.x, est.P, y, H, m.R)
    if not ok:
        raise CovarianceNotPD(f"innovation covariance of {m.kind.value} packet is not PD")
    return EkfEstimate(x, P, est.t)


def kinematic_terms(est: EkfEstimate, u: ImuSample) -> NDArray:
    """Measured parts of the inverted kinematics: (a_x + w_z v_y - w_y v_z, a_y - w_z v_x + w_x v_z)."""
    wx, wy, wz = u.gyro
    vx, vy, vz = est.x[IV]
    return np.array([u.accel[0] + wz * vy - wy * vz, u.accel[1] - wz * vx + wx * vz])


def _angles_from_terms(vdot, q, pitch, g):
    if abs(pitch) >= math.radians(80.0):
        return 0.0, 0.0, False
    arg_p = (vdot[0] - q[0]) / g
    arg_r = (q[1] - vdot[1]) / (g * math.cos(pitch))
    valid = abs(arg_p) <= 1.0 and abs(arg_r) <= 1.0
    roll_ref = math.asin(min(1.0, max(-1.0, arg_r)))
    pitch_ref = math.asin(min(1.0, max(-1.0, arg_p)))
    return roll_ref, pitch_ref, valid


def reference_angles(
    est: EkfEstimate, u: ImuSample, vdot: NDArray, g: float = G
) -> tuple[float, float, bool]:
    """Roll and pitch from inverting the point-mass kinematics.

    Returns ``(roll_ref, pitch_ref, valid)``; ``valid`` is False when either
    arcsine argument had to be clamped.
    """
    return _angles_from_terms(vdot, kinematic_terms(est, u), est.x[PITCH], g)


@dataclass
class RefAngleConfig:
    enabled: bool = True
    sigma: float = math.radians(1.0)
    inflate: float = 10.0
    hysteresis_steps: int = 5
    min_speed: float = 5.0
    jerk_limit: float = 1.0  # on the low-passed planar acceleration, m/s^3
    jerk_tau: float = 0.05
    tau: float = 0.3


class RefAngleGenerator:
    """Builds REF_ANGLES packets each step.

    The velocity derivative is the backward difference of the posterior
    velocity over the last step, low-passed with a first-order filter. The
    velocity correction made by the reference-angle update itself is left
    out of the difference (see :meth:`exclude`); otherwise that correction,
    divided by the step, feeds straight back into the next angle. The
    measured kinematic terms pass through the same filter so that every
    term carries the same delay.
    """

    def __init__(self, cfg: RefAngleConfig | None = None, g: float = G):
        self.cfg = cfg or RefAngleConfig()
        self.g = g
        self._v_prev: NDArray | None = None
        self._t_prev: float | None = None
        self._vdot = np.zeros(3)
        self._self_dv = np.zeros(3)
        self._q: NDArray | None = None
        self._a_lp: NDArray | None = None
        self._invalid_hist = deque(maxlen=self.cfg.hysteresis_steps)
        self.last = (0.0, 0.0, False)

    def observe_posterior(self, est: EkfEstimate) -> None:
        v = est.x[IV]
        if self._v_prev is not None and est.t > self._t_prev:
            dt = est.t - self._t_prev
            raw = (v - self._self_dv - self._v_prev) / dt
            k = dt / (self.cfg.tau + dt)
            self._vdot = self._vdot + k * (raw - self._vdot)
        self._v_prev = v.copy()
        self._self_dv[:] = 0.0
        self._t_prev = est.t

    def exclude(self, before: EkfEstimate, after: EkfEstimate) -> None:
        """Record the velocity change of a reference-angle update."""
        self._self_dv += after.x[IV] - before.x[IV]

    @property
    def vdot(self) -> NDArray:
        return self._vdot

    def packet(self, est: EkfEstimate, u: ImuSample, dt: float) -> MeasurementPacket | None:
        q = kinematic_terms(est, u)
        if self._q is None:
            self._q = q
        else:
            self._q = self._q + dt / (self.cfg.tau + dt) * (q - self._q)
        roll, pitch, valid = _angles_from_terms(self._vdot, self._q, est.x[PITCH], self.g)
        a = u.accel[:2]
        if self._a_lp is None:
            self._a_lp, jerk = a.copy(), 0.0
        else:
            step = dt / (self.cfg.jerk_tau + dt) * (a - self._a_lp)
            self._a_lp = self._a_lp + step
            jerk = float(np.max(np.abs(step))) / dt
        gated = est.x[6] < self.cfg.min_speed or jerk > self.cfg.jerk_limit
        ok = valid and not gated
        self.last = (roll, pitch, ok)
        inflate = any(self._invalid_hist)
        self._invalid_hist.append(not ok)
        if not ok:
            return None
        var = self.cfg.sigma**2 * (self.cfg.inflate if inflate else 1.0)
        return MeasurementPacket(
            MeasurementKind.REF_ANGLES, [roll, pitch], np.diag([var, var]), est.t, Frame.NAV
        )


def initial_estimate(fix: GnssFix, cfg: EkfConfig | None = None, speed: float = 0.0) -> EkfEstimate:
    """Estimate seeded from a GNSS fix: position, heading, forward speed."""
    cfg = cfg or EkfConfig()
    x = np.zeros(NX)
    x[IP] = fix.p
    x[YAW] = wrap_angle(fix.heading) if fix.heading is not None else 0.0
    x[6] = speed
    P = np.diag(
        [cfg.init_pos_var] * 3 + [cfg.init_ang_var] * 3 + [cfg.init_vel_var] + [cfg.init_vel_var_lat] * 2
    )
    if cfg.mode.planar:
        P[ROLL, ROLL] = P[PITCH, PITCH] = 1e-12
        P[2, 2] = P[8, 8] = 1e-12
    return EkfEstimate(x, P, fix.t)


def position_std(est: EkfEstimate) -> NDArray:
    return np.sqrt(np.diag(est.P)[IP])


@dataclass
class StepResult:
    est: EkfEstimate
    prior: EkfEstimate
    applied: list = field(default_factory=list)


class Ekf3d:
    """Stateful wrapper: one predict per IMU tick, then every due update."""

    def __init__(self, est: EkfEstimate, cfg: EkfConfig | None = None, ref_cfg: RefAngleConfig | None = None):
        self.cfg = cfg or EkfConfig()
        self.est = est
        self.ref = RefAngleGenerator(ref_cfg, self.cfg.g)
        self.ref.observe_posterior(est)

    def predict(self, u: ImuSample, dt: float, bank: float = 0.0) -> EkfEstimate:
        self.est = predict(self.est, u, dt, self.cfg, bank)
        return self.est

    def update(self, m: MeasurementPacket, innovation_override=None) -> EkfEstimate:
        self.est = update(self.est, m, innovation_override)
        return self.est

    def step(self, u: ImuSample, packets=(), dt: float | None = None, bank: float = 0.0) -> StepResult:
        dt = dt if dt is not None else u.t - self.est.t
        self.predict(u, dt, bank)
        prior = self.est.copy()
        applied = []
        if self.ref.cfg.enabled and not self.cfg.mode.planar:
            pkt = self.ref.packet(self.est, u, dt)
            if pkt is not None:
                self.update(pkt)
                applied.append(pkt)
        for m in sorted(packets, key=lambda p: p.t):
            if self.cfg.mode.planar and m.kind == MeasurementKind.REF_ANGLES:
                continue
            if self.cfg.mode.planar and m.kind == MeasurementKind.POSITION and len(m.value) == 3:
                m = MeasurementPacket(m.kind, m.value[:2], m.R[:2, :2], m.t, m.frame)
            self.update(m)
            applied.append(m)
        self.ref.observe_posterior(self.est)
        return StepResult(self.est, prior, applied)
