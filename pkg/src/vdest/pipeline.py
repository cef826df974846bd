"""Estimator composition: IMU frontend, EKF, velocity provider and ACOR.

One loop iteration per IMU tick. The EKF predicts with the filtered IMU,
then applies the reference angles, the virtual velocity and every GNSS fix
that arrived since the previous tick. GNSS fixes are moved to the tick time
with the current velocity and yaw rate before the update.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from itertools import groupby

import numpy as np
from numpy.typing import NDArray

from .acor import Acor, AcorConfig, Phase
from .core_math import OutOfCorridor, body_to_nav, euler_rates, is_spd
from .ekf3d import (
    PITCH,
    ROLL,
    YAW,
    EkfConfig,
    EkfEstimate,
    EstimatorMode,
    Frame,
    MeasurementKind,
    MeasurementPacket,
    RefAngleConfig,
    RefAngleGenerator,
    initial_estimate,
    innovation,
    position_std,
    predict,
    update,
)
from .sensors import (
    ActuationSample,
    FrontendConfig,
    GnssFix,
    ImuFrontend,
    MeasurementQueue,
    MountConfig,
    RtkStatus,
    WheelSpeeds,
    estimate_stationary_bias,
)
from .sideslip_ukf import SideslipUkf, UkfConfig
from .virtual_velocity import (
    VehicleParams,
    VelocityProvider,
    VirtualVelocityConfig,
    kstm_velocity,
    nonholonomic_velocity,
    with_vertical,
)

log = logging.getLogger(__name__)

# trace flag bits
F_POSITION = 1
F_HEADING = 2
F_VELOCITY = 4
F_REF_ANGLES = 8
F_GATED = 16
F_DECAY = 32
F_DROPOUT = 64
F_UKF_HOLD = 128
F_MAP_ANGLES = 256


class NotInitialized(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    ekf: EkfConfig = field(default_factory=EkfConfig)
    ref: RefAngleConfig = field(default_factory=RefAngleConfig)
    provider: VelocityProvider = VelocityProvider.UKF
    velocity: VirtualVelocityConfig = field(default_factory=VirtualVelocityConfig)
    ukf: UkfConfig = field(default_factory=UkfConfig)
    acor: AcorConfig = field(default_factory=AcorConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    heading_sigma: float = math.radians(0.3)
    map_angle_sigma: float = math.radians(0.5)
    use_heading: bool = True
    align_fixes: bool = True
    calibrate: bool = True
    predict_only: bool = False
    check_pd: bool = False

    @property
    def mode(self) -> EstimatorMode:
        return self.ekf.mode


@dataclass
class Trace:
    """Per-tick estimator output and diagnostics."""

    t: NDArray
    x: NDArray  # (N, 9)
    p_diag: NDArray  # (N, 9)
    beta: NDArray
    flags: NDArray
    jump: NDArray  # |posterior - prior| of position
    ref: NDArray  # (N, 3): roll_ref, pitch_ref, valid
    ukf: NDArray  # (N, 2): v, beta of the UKF (nan when not running)
    t_predict: NDArray  # wall time of the predict, seconds
    t_update: NDArray  # wall time of all updates in the tick
    t_ukf: NDArray
    n_updates: NDArray
    gate_events: list = field(default_factory=list)
    ukf_events: list = field(default_factory=list)
    pd_violations: int = 0

    def __len__(self):
        return len(self.t)

    def step_time(self, skip: int = 0) -> tuple[float, float]:
        """Mean EKF step (one predict plus one update) and mean UKF step, seconds.

        ``skip`` leading ticks are ignored (JIT warm-up).
        """
        n = self.n_updates[skip:].sum()
        per_update = self.t_update[skip:].sum() / n if n else 0.0
        ekf = float(np.mean(self.t_predict[skip:]) + per_update)
        ukf = self.t_ukf[skip:]
        ukf = ukf[np.isfinite(ukf)]
        return ekf, float(np.mean(ukf)) if len(ukf) else math.nan


def _fix_packet(fix: GnssFix, sigma: NDArray, est: EkfEstimate, planar: bool, align: bool) -> MeasurementPacket:
    p = np.asarray(fix.p, dtype=float)
    if align:
        age = est.t - fix.t
        p = p + age * (body_to_nav(est.x[3:6]) @ est.x[6:9])
    var = np.asarray(sigma, dtype=float) ** 2
    if planar:
        return MeasurementPacket(MeasurementKind.POSITION, p[:2], np.diag(var[:2]), est.t, Frame.NAV)
    return MeasurementPacket(MeasurementKind.POSITION, p, np.diag(var), est.t, Frame.NAV)


class Pipeline:
    def __init__(
        self,
        cfg: PipelineConfig | None = None,
        params: VehicleParams | None = None,
        track=None,
        mounts: dict | None = None,
    ):
        self.cfg = cfg or PipelineConfig()
        self.params = params or VehicleParams()
        if self.cfg.mode.needs_track and track is None:
            raise ValueError(f"{self.cfg.mode.name} requires a track model")
        self.track = track
        self.frontend = ImuFrontend(mounts, self.cfg.frontend)
        self.acor = Acor(self.cfg.acor)
        self.ref = RefAngleGenerator(self.cfg.ref, self.cfg.ekf.g)
        self.ukf = SideslipUkf(self.params, self.cfg.ukf, self.cfg.ekf.g)
        self.est: EkfEstimate | None = None
        self._wheel: WheelSpeeds | None = None
        self._act: ActuationSample | None = None
        self._s_hint: float | None = None
        self.pd_violations = 0

    # --------------------------------------------------------------- helpers
    def calibrate(self, records) -> None:
        """Per-IMU biases from a stationary recording."""
        by_src = {}
        for r in records:
            by_src.setdefault(r.source_id, []).append(r)
        for src, recs in by_src.items():
            gb, ab = estimate_stationary_bias(recs)
            m = self.frontend.mounts.get(src)
            if m is None:
                m = self.frontend.mounts[src] = MountConfig()
            m.gyro_bias, m.accel_bias = gb, ab

    def _map_angles(self, est: EkfEstimate) -> tuple[float, float]:
        try:
            s, _ = self.track.centerline.project(est.x[:2], s_hint=self._s_hint)
        except OutOfCorridor:
            return 0.0, 0.0
        self._s_hint = float(s[0])
        return float(self.track.bank(s)[0]), float(self.track.slope(s)[0])

    def _initialize(self, fix: GnssFix, t: float) -> None:
        speed = 0.0
        if self._wheel is not None:
            speed = 0.5 * (self._wheel.fl + self._wheel.fr) * self.params.r_dyn_f
        est = initial_estimate(fix, self.cfg.ekf, speed)
        age = t - fix.t
        est.x[0] += age * speed * math.cos(est.x[YAW])
        est.x[1] += age * speed * math.sin(est.x[YAW])
        est.t = t
        self.est = est
        self.ref.observe_posterior(est)
        self.acor.start(t)
        if self.cfg.provider == VelocityProvider.UKF:
            self.ukf.initialize(speed, t)

    # --------------------------------------------------------------- main loop
    def run(self, streams, init: EkfEstimate | None = None, t_end: float | None = None) -> Trace:
        cfg = self.cfg
        if cfg.calibrate and streams.calibration:
            self.calibrate(streams.calibration)
        queue = MeasurementQueue()
        queue.extend(streams.gnss)
        queue.extend(streams.wheels)
        queue.extend(streams.actuation)
        if init is not None:
            self.est = init.copy()
            self.ref.observe_posterior(self.est)
            if cfg.provider == VelocityProvider.UKF:
                self.ukf.initialize(float(np.hypot(init.x[6], init.x[7])), init.t)

        rows = []
        planar = cfg.mode.planar
        for t, group in groupby(streams.imu, key=lambda s: s.t):
            if t_end is not None and t > t_end:
                break
            samples = list(group)
            u = self.frontend.process(t, samples)
            due = queue.pop_until(t)
            fixes = []
            new_wheel = False
            for rec in due:
                if isinstance(rec, GnssFix):
                    fixes.append(rec)
                elif isinstance(rec, WheelSpeeds):
                    self._wheel, new_wheel = rec, True
                elif isinstance(rec, ActuationSample):
                    self._act = rec
            if self.est is None:
                for fix in fixes:
                    if fix.rtk_status == RtkStatus.RTK_FIXED and fix.p is not None and fix.heading is not None:
                        self._initialize(fix, t)
                        break
                continue
            if t <= self.est.t:
                continue
            rows.append(self._tick(t, u, fixes, new_wheel, planar))
        if not rows:
            raise NotInitialized("estimator never initialised: no RTK-fixed GNSS fix with heading")
        return self._trace(rows)

    def _tick(self, t, u, fixes, new_wheel, planar):
        cfg = self.cfg
        dt = t - self.est.t
        flags = 0
        road = (float(self.est.x[ROLL]), float(self.est.x[PITCH]))
        bank = slope = 0.0
        if cfg.mode.needs_track:
            bank, slope = self._map_angles(self.est)
        if planar and cfg.mode == EstimatorMode.PLANAR_WITH_BANK_MAP:
            road = (bank, slope)

        t0 = time.perf_counter()
        self.est = predict(self.est, u, dt, cfg.ekf, bank)
        t_pred = time.perf_counter() - t0
        prior_p = self.est.x[:3].copy()
        self._t_upd = 0.0
        self._n_upd = 0
        ref_row = (math.nan, math.nan, 0.0)

        if not cfg.predict_only:
            # reference angles from the point-mass inversion
            if cfg.ref.enabled and not planar:
                pkt = self.ref.packet(self.est, u, dt)
                ref_row = (self.ref.last[0], self.ref.last[1], float(self.ref.last[2]))
                if pkt is not None:
                    before = self.est
                    self._apply(pkt)
                    self.ref.exclude(before, self.est)
                    flags |= F_REF_ANGLES
            if cfg.mode == EstimatorMode.THREED_WITH_ANGLE_MAP:
                var = cfg.map_angle_sigma**2
                pkt = MeasurementPacket(
                    MeasurementKind.REF_ANGLES, [bank, slope], np.diag([var, var]), t, Frame.NAV
                )
                self._apply(pkt)
                flags |= F_MAP_ANGLES

            # virtual velocity
            t_ukf = math.nan
            vpkt = None
            prov = cfg.provider
            if prov == VelocityProvider.UKF:
                t0 = time.perf_counter()
                vpkt = self.ukf.step(
                    u, road, dt,
                    self._wheel if new_wheel else None,
                    self._act if new_wheel else None,
                    float(self.frontend.omega_dot[2]),
                )
                t_ukf = time.perf_counter() - t0
                if not new_wheel:
                    vpkt = None
                if self.ukf.est is not None and self.ukf.est.x[0] <= cfg.ukf.v_min:
                    flags |= F_UKF_HOLD
            elif new_wheel and self._wheel is not None:
                if prov == VelocityProvider.NONHOLONOMIC:
                    vpkt = nonholonomic_velocity(self._wheel, self.params, cfg.velocity, u)
                elif prov == VelocityProvider.KSTM and self._act is not None:
                    vpkt = kstm_velocity(self._wheel, self._act, self.params, cfg.velocity, u)
            if vpkt is not None:
                vpkt.t = t
                if not planar:
                    vpkt = with_vertical(vpkt, cfg.velocity.sigma_vz)
                self._apply(vpkt)
                flags |= F_VELOCITY

            # GNSS
            for fix in sorted(fixes, key=lambda f: (f.t, f.source_id)):
                sigma = self.acor.position_sigma(fix, position_std(self.est))
                tr = self.acor.trackers.get(fix.source_id)
                if tr is not None and tr.phase == Phase.DECAY:
                    flags |= F_DECAY
                if tr is not None and tr.phase == Phase.DROPOUT:
                    flags |= F_DROPOUT
                if sigma is None or fix.p is None:
                    continue
                pkt = _fix_packet(fix, sigma, self.est, planar, cfg.align_fixes)
                y, _, S = innovation(self.est, pkt)
                override = self.acor.gate(y, S, float(self.est.x[YAW]), fix.t, fix.source_id)
                if override is not None:
                    flags |= F_GATED
                self._apply(pkt, override)
                flags |= F_POSITION
                if cfg.use_heading and fix.heading is not None and fix.rtk_status == RtkStatus.RTK_FIXED:
                    heading = fix.heading
                    if cfg.align_fixes:
                        heading += (t - fix.t) * euler_rates(self.est.x[3:6], u.gyro)[2]
                    hp = MeasurementPacket(
                        MeasurementKind.HEADING, [heading], [[cfg.heading_sigma**2]], t, Frame.NAV
                    )
                    self._apply(hp)
                    flags |= F_HEADING
        else:
            t_ukf = math.nan

        self.ref.observe_posterior(self.est)
        if cfg.check_pd:
            if not is_spd(self.est.P):
                self.pd_violations += 1
            if self.ukf.est is not None and not is_spd(self.ukf.est.P):
                self.pd_violations += 1
        ukf_row = (math.nan, math.nan)
        if self.ukf.est is not None and cfg.provider == VelocityProvider.UKF:
            ukf_row = (float(self.ukf.est.x[0]), float(self.ukf.est.x[1]))
        x = self.est.x
        return (
            t, x.copy(), np.diag(self.est.P).copy(), math.atan2(x[7], x[6]), flags,
            float(np.linalg.norm(x[:3] - prior_p)), ref_row, ukf_row,
            t_pred, self._t_upd, t_ukf, self._n_upd,
        )

    def _apply(self, pkt: MeasurementPacket, override: NDArray | None = None) -> None:
        t0 = time.perf_counter()
        self.est = update(self.est, pkt, override)
        self._t_upd += time.perf_counter() - t0
        self._n_upd += 1

    def _trace(self, rows) -> Trace:
        cols = list(zip(*rows))
        return Trace(
            t=np.array(cols[0]),
            x=np.array(cols[1]),
            p_diag=np.array(cols[2]),
            beta=np.array(cols[3]),
            flags=np.array(cols[4], dtype=np.int64),
            jump=np.array(cols[5]),
            ref=np.array(cols[6], dtype=float),
            ukf=np.array(cols[7], dtype=float),
            t_predict=np.array(cols[8]),
            t_update=np.array(cols[9]),
            t_ukf=np.array(cols[10], dtype=float),
            n_updates=np.array(cols[11]),
            gate_events=list(self.acor.gate_events),
            ukf_events=list(self.ukf.events),
            pd_violations=self.pd_violations,
        )


def run_pipeline(streams, cfg: PipelineConfig | None = None, params=None, track=None, **kw) -> Trace:
    p = Pipeline(cfg, params, track, {k: _copy_mount(m) for k, m in streams.mounts.items()})
    return p.run(streams, **kw)


def _copy_mount(m):
    return MountConfig(m.lever_arm.copy(), m.gyro_bias.copy(), m.accel_bias.copy())
