"""Multi-rate sensor streams sampled from a ground truth.

IMUs at 125 Hz (three units with lever arms, turn-on bias, bias random
walk and white noise), two GNSS receivers at 20 Hz and 5 Hz with scripted
degradation, wheel speeds and actuation at 100 Hz.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from ..core_math import G, wrap_angle
from ..sensors import ActuationSample, GnssFix, ImuSample, MountConfig, RtkStatus, WheelSpeeds
from .vehicle import GroundTruth

IMU_DT = 0.008
GNSS_DT = {0: 0.05, 1: 0.2}
WHEEL_DT = 0.01


@dataclass
class Window:
    t0: float
    t1: float

    def contains(self, t) -> NDArray:
        return (np.asarray(t) >= self.t0) & (np.asarray(t) <= self.t1)


@dataclass
class SigmaWindow(Window):
    """Receiver reports ``sigma`` and ``status`` inside the window."""

    sigma: float = 0.5
    status: RtkStatus = RtkStatus.RTK_FLOAT


@dataclass
class OffsetWindow(Window):
    """Undetected position offset, ramped in linearly over ``ramp`` seconds."""

    offset: tuple = (0.0, 1.0, 0.0)
    ramp: float = 5.0
    frame: str = "nav"


@dataclass
class Outlier:
    t: float
    offset: tuple = (10.0, 0.0, 0.0)
    source: int = 0


@dataclass
class NoiseConfig:
    seed: int = 0
    accel_sigma: float = 0.05
    gyro_sigma: float = 0.002
    accel_bias_sigma: float = 0.02
    gyro_bias_sigma: float = 5e-4
    accel_bias_walk: float = 1e-4
    gyro_bias_walk: float = 1e-5
    gyro_cross_axis: float = 0.0  # std of the off-diagonal sensitivity terms
    gnss_sigma: float = 0.02
    heading_sigma: float = np.radians(0.2)
    heading_bias: float = np.radians(0.3)
    heading_sources: tuple = (0,)
    wheel_sigma: float = 0.2
    steer_sigma: float = 0.001
    torque_sigma: float = 20.0
    lever_arms: tuple = ((0.3, 0.1, 0.05), (-0.2, -0.15, 0.0), (0.5, 0.0, -0.1))
    calibration: float = 3.0
    dropouts: list = field(default_factory=list)
    sigma_schedule: list = field(default_factory=list)
    offsets: list = field(default_factory=list)
    outliers: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("accel_sigma", "gyro_sigma", "gnss_sigma", "heading_sigma", "wheel_sigma", "steer_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        ws = sorted(self.dropouts, key=lambda w: w.t0)
        for a, b in zip(ws, ws[1:]):
            if b.t0 <= a.t1:
                raise ValueError("dropout windows overlap")

    @classmethod
    def noiseless(cls, **kw) -> "NoiseConfig":
        zero = dict(
            accel_sigma=0.0, gyro_sigma=0.0, accel_bias_sigma=0.0, gyro_bias_sigma=0.0,
            accel_bias_walk=0.0, gyro_bias_walk=0.0, gnss_sigma=0.0, heading_sigma=0.0,
            heading_bias=0.0, wheel_sigma=0.0, steer_sigma=0.0, torque_sigma=0.0,
        )
        zero.update(kw)
        return cls(**zero)

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseConfig":
        d = dict(d)
        for k in ("heading_sigma", "heading_bias"):
            if k + "_deg" in d:
                d[k] = np.radians(d.pop(k + "_deg"))
        d["dropouts"] = [Window(*w) for w in d.get("dropouts", [])]
        d["sigma_schedule"] = [
            SigmaWindow(w["t0"], w["t1"], w.get("sigma", 0.5), RtkStatus[w.get("status", "RTK_FLOAT")])
            for w in d.get("sigma_schedule", [])
        ]
        d["offsets"] = [OffsetWindow(**w) for w in d.get("offsets", [])]
        d["outliers"] = [Outlier(**o) for o in d.get("outliers", [])]
        for k in ("lever_arms", "heading_sources"):
            if k in d:
                d[k] = tuple(tuple(x) if isinstance(x, list) else x for x in d[k])
        return cls(**d)


@dataclass
class SensorStreams:
    imu: list  # ImuSample, all sources, time-ordered
    gnss: list  # GnssFix
    wheels: list
    actuation: list
    calibration: list  # stationary ImuSample records before the run
    mounts: dict  # source -> MountConfig with lever arm only (biases unknown)
    truth_index: dict = field(default_factory=dict)


def _grid(gt: GroundTruth, step: float) -> NDArray:
    k = int(round(step / gt.dt))
    return np.arange(0, len(gt.t), k)


def _bias_path(rng, n, dt, sigma0, walk, dim=3):
    b0 = rng.normal(0.0, sigma0, dim) if sigma0 > 0 else np.zeros(dim)
    if walk <= 0:
        return np.tile(b0, (n, 1))
    steps = rng.normal(0.0, walk * np.sqrt(dt), (n, dim))
    steps[0] = 0.0
    return b0 + np.cumsum(steps, axis=0)


def _noise(rng, sigma, shape):
    return rng.normal(0.0, sigma, shape) if sigma > 0 else np.zeros(shape)


def _cross_axis(rng, sigma):
    m = _noise(rng, sigma, (3, 3))
    np.fill_diagonal(m, 0.0)
    return m


def synthesize_sensors(gt: GroundTruth, noise: NoiseConfig) -> SensorStreams:
    """Sample noisy sensor streams; fully determined by ``noise.seed``."""
    ss = np.random.SeedSequence(noise.seed)
    rng_imu, rng_gnss, rng_wheel, rng_act, rng_cal = [np.random.default_rng(s) for s in ss.spawn(5)]

    # IMU ------------------------------------------------------------------
    idx = _grid(gt, IMU_DT)
    n = len(idx)
    w = gt.omega[idx]
    wd = gt.omega_dot[idx]
    a = gt.a_body[idx]
    imu_streams = []
    mounts = {}
    cal_records = []
    n_cal = int(round(noise.calibration / IMU_DT)) + 1 if noise.calibration > 0 else 0
    for src, r in enumerate(noise.lever_arms):
        r = np.asarray(r, dtype=float)
        mounts[src] = MountConfig(lever_arm=r)
        a_s = a + np.cross(wd, r) + np.cross(w, np.cross(w, r))
        gb = _bias_path(rng_imu, n + n_cal, IMU_DT, noise.gyro_bias_sigma, noise.gyro_bias_walk)
        ab = _bias_path(rng_imu, n + n_cal, IMU_DT, noise.accel_bias_sigma, noise.accel_bias_walk)
        M = np.eye(3) + _cross_axis(rng_imu, noise.gyro_cross_axis)
        gyro = w @ M.T + gb[n_cal:] + _noise(rng_imu, noise.gyro_sigma, (n, 3))
        acc = a_s + ab[n_cal:] + _noise(rng_imu, noise.accel_sigma, (n, 3))
        imu_streams.append((gyro, acc))
        if n_cal:
            # parked on level ground before the run
            t_cal = (np.arange(n_cal) - n_cal) * IMU_DT
            g_cal = gb[:n_cal] + _noise(rng_cal, noise.gyro_sigma, (n_cal, 3))
            a_cal = np.array([0.0, 0.0, G]) + ab[:n_cal] + _noise(rng_cal, noise.accel_sigma, (n_cal, 3))
            cal_records += [ImuSample(float(t_cal[k]), g_cal[k], a_cal[k], src) for k in range(n_cal)]
    imu = []
    for k, i in enumerate(idx):
        t = float(gt.t[i])
        for src, (gyro, acc) in enumerate(imu_streams):
            imu.append(ImuSample(t, gyro[k], acc[k], src))

    # GNSS -----------------------------------------------------------------
    gnss = []
    heading_true = gt.angles[:, 2]
    for src, step in GNSS_DT.items():
        gi = _grid(gt, step)
        tg = gt.t[gi]
        pos_noise = _noise(rng_gnss, 1.0, (len(gi), 3))
        head_noise = _noise(rng_gnss, noise.heading_sigma, len(gi))
        for k, i in enumerate(gi):
            t = float(tg[k])
            if any(wd_.contains(t) for wd_ in noise.dropouts):
                continue
            sigma, status = noise.gnss_sigma, RtkStatus.RTK_FIXED
            for sw in noise.sigma_schedule:
                if sw.contains(t):
                    sigma, status = sw.sigma, sw.status
            p = gt.p[i] + sigma * pos_noise[k]
            for ow in noise.offsets:
                if ow.contains(t):
                    ramp = min((t - ow.t0) / ow.ramp, 1.0) if ow.ramp > 0 else 1.0
                    off = np.asarray(ow.offset, dtype=float)
                    if ow.frame == "body":
                        c, s_ = np.cos(heading_true[i]), np.sin(heading_true[i])
                        off = np.array([c * off[0] - s_ * off[1], s_ * off[0] + c * off[1], off[2]])
                    p = p + ramp * off
            for o in noise.outliers:
                if o.source == src and abs(t - o.t) < 0.5 * step:
                    p = p + np.asarray(o.offset, dtype=float)
            heading = None
            if src in noise.heading_sources:
                heading = float(wrap_angle(heading_true[i] + noise.heading_bias + head_noise[k]))
            reported = max(sigma, 1e-3)
            gnss.append(GnssFix(t, p, np.full(3, reported), status, heading, src))
    gnss.sort(key=lambda f: (f.t, f.source_id))

    # wheels and actuation ---------------------------------------------------
    wi = _grid(gt, WHEEL_DT)
    wn = gt.wheel[wi] + _noise(rng_wheel, noise.wheel_sigma, (len(wi), 4))
    wheels = [WheelSpeeds(float(gt.t[i]), *map(float, wn[k])) for k, i in enumerate(wi)]
    steer = gt.steer[wi] + _noise(rng_act, noise.steer_sigma, len(wi))
    tq = gt.torques[wi] + _noise(rng_act, noise.torque_sigma, (len(wi), 5)) * (np.abs(gt.torques[wi]) > 0)
    actuation = [ActuationSample(float(gt.t[i]), float(steer[k]), *map(float, tq[k])) for k, i in enumerate(wi)]

    return SensorStreams(imu, gnss, wheels, actuation, cal_records, mounts)
