"""Virtual body-velocity measurements from wheel speeds and steering.

Two simple providers: the nonholonomic constraint (wheel speed times
dynamic radius, zero lateral velocity) and the kinematic single-track model,
which adds the geometric side slip implied by the steering angle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import yaml

from .ekf3d import Frame, MeasurementKind, MeasurementPacket
from .sensors import ActuationSample, ImuSample, WheelSpeeds


class VelocityProvider(Enum):
    NONE = "none"
    NONHOLONOMIC = "nonholonomic"
    KSTM = "kstm"
    UKF = "ukf"


@dataclass(frozen=True)
class MFCoeffs:
    B: float
    C: float
    D: float
    E: float = 0.0

    def __post_init__(self):
        if self.B <= 0:
            raise ValueError("MF stiffness factor B must be positive")
        if not 1.0 <= self.C <= 3.0:
            raise ValueError("MF shape factor C must lie in [1, 3]")
        if not 0.0 < self.D <= 3.0:
            raise ValueError("MF peak factor D must lie in (0, 3]")
        if self.E > 1.0:
            raise ValueError("MF curvature factor E must not exceed 1")


@dataclass(frozen=True)
class VehicleParams:
    """Single-track vehicle and tire parameters.

    ``mf_*`` are normalised Magic Formula coefficients (force over normal
    load) per axle (f/r) and direction (x/y).
    """

    l_f: float = 1.6
    l_r: float = 1.4
    b_f: float = 1.64
    b_r: float = 1.58
    m: float = 750.0
    J_z: float = 1000.0
    r_dyn_f: float = 0.3
    r_dyn_r: float = 0.31
    h_cog: float = 0.0
    mf_x_f: MFCoeffs = field(default_factory=lambda: MFCoeffs(14.0, 1.65, 1.6, 0.0))
    mf_x_r: MFCoeffs = field(default_factory=lambda: MFCoeffs(14.0, 1.65, 1.6, 0.0))
    mf_y_f: MFCoeffs = field(default_factory=lambda: MFCoeffs(20.0, 1.5, 1.6, 0.0))
    mf_y_r: MFCoeffs = field(default_factory=lambda: MFCoeffs(22.0, 1.5, 1.6, 0.0))

    def __post_init__(self):
        for name in ("l_f", "l_r", "b_f", "b_r", "m", "J_z", "r_dyn_f", "r_dyn_r"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.h_cog < 0:
            raise ValueError("h_cog must be non-negative")

    @property
    def l(self) -> float:
        return self.l_f + self.l_r

    @classmethod
    def from_dict(cls, d: dict) -> "VehicleParams":
        d = dict(d)
        for k in ("mf_x_f", "mf_x_r", "mf_y_f", "mf_y_r"):
            if k in d and not isinstance(d[k], MFCoeffs):
                d[k] = MFCoeffs(**d[k])
        return cls(**d)

    @classmethod
    def from_yaml(cls, path) -> "VehicleParams":
        with open(path) as f:
            return cls.from_dict(yaml.safe_load(f))


@dataclass
class VirtualVelocityConfig:
    """Noise model for the simple providers.

    Standard deviations grow linearly with |a_x| and |a_y|.
    """

    sigma_vx: float = 0.1
    sigma_vy: float = 0.1
    k_ax: float = 0.08
    k_ay: float = 0.08
    sigma_vz: float = 0.1
    wheels: str = "front"

    def R(self, u: ImuSample | None) -> np.ndarray:
        ex = 0.0 if u is None else self.k_ax * abs(u.accel[0]) + self.k_ay * abs(u.accel[1])
        return np.diag([(self.sigma_vx + ex) ** 2, (self.sigma_vy + ex) ** 2])


def with_vertical(pkt: MeasurementPacket, sigma_vz: float) -> MeasurementPacket:
    """Append v_z = 0 to a planar body-velocity packet.

    The car stays on the road surface, so the body-frame vertical speed is
    zero up to suspension motion.
    """
    if pkt.value.shape[0] == 3:
        return pkt
    R = np.zeros((3, 3))
    R[:2, :2] = pkt.R
    R[2, 2] = sigma_vz**2
    return MeasurementPacket(pkt.kind, np.append(pkt.value, 0.0), R, pkt.t, pkt.frame)


def _wheel_speed(w: WheelSpeeds, params: VehicleParams, wheels: str) -> float:
    if wheels == "front":
        return 0.5 * (w.fl + w.fr) * params.r_dyn_f
    if wheels == "rear":
        return 0.5 * (w.rl + w.rr) * params.r_dyn_r
    if wheels == "all":
        return 0.25 * ((w.fl + w.fr) * params.r_dyn_f + (w.rl + w.rr) * params.r_dyn_r)
    raise ValueError(f"unknown wheel selection {wheels!r}")


def nonholonomic_velocity(
    w: WheelSpeeds,
    params: VehicleParams,
    cfg: VirtualVelocityConfig | None = None,
    u: ImuSample | None = None,
) -> MeasurementPacket:
    """Forward speed from the wheel speeds, lateral speed pinned to zero."""
    cfg = cfg or VirtualVelocityConfig()
    vx = _wheel_speed(w, params, cfg.wheels)
    return MeasurementPacket(MeasurementKind.VEL_VIRTUAL, [vx, 0.0], cfg.R(u), w.t, Frame.BODY)


def kinematic_sideslip(steer: float, params: VehicleParams) -> float:
    return math.atan(params.l_r / params.l * math.tan(steer))


def front_axle_speed(w: WheelSpeeds, steer: float, yaw_rate: float, params: VehicleParams) -> float:
    """Front-axle midpoint speed from the two front wheels."""
    half = 0.5 * params.b_f * math.cos(steer) * yaw_rate
    return 0.5 * ((w.fl * params.r_dyn_f + half) + (w.fr * params.r_dyn_f - half))


def kstm_velocity(
    w: WheelSpeeds,
    act: ActuationSample,
    params: VehicleParams,
    cfg: VirtualVelocityConfig | None = None,
    u: ImuSample | None = None,
) -> MeasurementPacket:
    """Body velocity from speed and the kinematic side slip angle."""
    cfg = cfg or VirtualVelocityConfig()
    if abs(act.steer) >= 0.5:
        raise ValueError("steering angle outside |delta| < 0.5 rad")
    yaw_rate = 0.0 if u is None else float(u.gyro[2])
    v = front_axle_speed(w, act.steer, yaw_rate, params)
    beta = kinematic_sideslip(act.steer, params)
    return MeasurementPacket(
        MeasurementKind.VEL_VIRTUAL,
        [v * math.cos(beta), v * math.sin(beta)],
        cfg.R(u),
        w.t,
        Frame.BODY,
    )
