"""Sensor records and the abstraction layer in front of the estimator.

Raw records are validated, bias- and lever-arm-corrected, averaged over the
IMUs that report on a tick and FIR-filtered before reaching the filter.
Brake and drive torques are signed wheel torques: braking is negative.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import threading
from collections import deque
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np
from numba import njit
from numpy.typing import ArrayLike, NDArray

from .core_math import G

log = logging.getLogger(__name__)

ACCEL_LIMIT = 200.0
GYRO_LIMIT = 50.0
IMU_RATE_HZ = 125.0


class LengthMismatch(ValueError):
    pass


class AllInvalid(ValueError):
    pass


class WindowTooShort(ValueError):
    pass


class ImuLoss(RuntimeError):
    """No valid IMU data for longer than the hold budget."""


class RtkStatus(IntEnum):
    # ordered from best to worst
    RTK_FIXED = 0
    RTK_FLOAT = 1
    STANDALONE = 2
    NONE = 3


@dataclass(slots=True)
class ImuSample:
    t: float
    gyro: NDArray
    accel: NDArray
    source_id: int = 0
    valid: bool = True


@dataclass(slots=True)
class GnssFix:
    t: float
    p: NDArray | None
    sigma: NDArray
    rtk_status: RtkStatus = RtkStatus.RTK_FIXED
    heading: float | None = None
    source_id: int = 0

    def __post_init__(self):
        if self.rtk_status == RtkStatus.NONE:
            self.p = None
        elif self.p is not None and np.any(np.asarray(self.sigma) <= 0):
            raise ValueError("GNSS sigma must be positive when a fix is present")


@dataclass(slots=True)
class WheelSpeeds:
    t: float
    fl: float
    fr: float
    rl: float
    rr: float

    def as_array(self) -> NDArray:
        return np.array([self.fl, self.fr, self.rl, self.rr])


@dataclass(slots=True)
class ActuationSample:
    t: float
    steer: float
    brake_fl: float = 0.0
    brake_fr: float = 0.0
    brake_rl: float = 0.0
    brake_rr: float = 0.0
    drive: float = 0.0

    def __post_init__(self):
        if abs(self.steer) >= 0.5:
            raise ValueError(f"steering angle {self.steer:.3f} rad outside |delta| < 0.5")


@dataclass(slots=True)
class MountConfig:
    """Per-IMU mounting and calibration.

    ``lever_arm`` is the sensor position relative to the COG in body axes.
    """

    lever_arm: NDArray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: NDArray = field(default_factory=lambda: np.zeros(3))
    accel_bias: NDArray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.lever_arm = np.asarray(self.lever_arm, dtype=float)
        self.gyro_bias = np.asarray(self.gyro_bias, dtype=float)
        self.accel_bias = np.asarray(self.accel_bias, dtype=float)
        if np.linalg.norm(self.lever_arm) >= 5.0:
            raise ValueError("lever arm must be shorter than 5 m")


def moving_average_taps(n: int) -> NDArray:
    return np.full(n, 1.0 / n)


def fir_filter(window: ArrayLike, taps: ArrayLike) -> NDArray:
    """Weighted sum of a sample window, oldest sample first.

    Taps must be normalised (DC gain exactly one).
    """
    window = np.asarray(window, dtype=float)
    taps = np.asarray(taps, dtype=float)
    if len(window) != len(taps):
        raise LengthMismatch(f"window has {len(window)} samples, taps {len(taps)}")
    if abs(taps.sum() - 1.0) > 1e-9:
        raise ValueError(f"taps sum to {taps.sum():.12f}, expected 1")
    return taps @ window


def fuse_imus(samples: Sequence[ImuSample]) -> ImuSample:
    valid = [s for s in samples if s.valid]
    if not valid:
        raise AllInvalid("no valid IMU sample on this tick")
    gyro = sum(s.gyro for s in valid) / len(valid)
    accel = sum(s.accel for s in valid) / len(valid)
    return ImuSample(max(s.t for s in valid), gyro, accel, source_id=-1, valid=True)


@njit(cache=True)
def _cog_accel(a, w, wd, r):
    # a - wd x r - w x (w x r)
    c0 = w[1] * r[2] - w[2] * r[1]
    c1 = w[2] * r[0] - w[0] * r[2]
    c2 = w[0] * r[1] - w[1] * r[0]
    out = np.empty(3)
    out[0] = a[0] - (wd[1] * r[2] - wd[2] * r[1]) - (w[1] * c2 - w[2] * c1)
    out[1] = a[1] - (wd[2] * r[0] - wd[0] * r[2]) - (w[2] * c0 - w[0] * c2)
    out[2] = a[2] - (wd[0] * r[1] - wd[1] * r[0]) - (w[0] * c1 - w[1] * c0)
    return out


@njit(cache=True)
def _in_range(v, limit):
    acc = 0.0
    for x in v:
        if not np.isfinite(x):
            return False
        acc += x * x
    return acc < limit * limit


def lever_arm_correct(s: ImuSample, mount: MountConfig, omega_dot: ArrayLike) -> ImuSample:
    """Transfer a specific-force reading from the sensor location to the COG."""
    a_cog = _cog_accel(
        np.asarray(s.accel, dtype=float),
        np.asarray(s.gyro, dtype=float),
        np.asarray(omega_dot, dtype=float),
        np.asarray(mount.lever_arm, dtype=float),
    )
    return replace(s, accel=a_cog)


def estimate_stationary_bias(
    samples: Sequence[ImuSample],
    expected_gravity: ArrayLike = (0.0, 0.0, G),
    min_window: float = 2.0,
) -> tuple[NDArray, NDArray]:
    """Gyro and accelerometer biases from a stationary recording.

    ``expected_gravity`` is the specific force a perfect accelerometer reads at
    rest, (0, 0, +g) on level ground.
    """
    valid = [s for s in samples if s.valid]
    if len(valid) < 2 or valid[-1].t - valid[0].t < min_window - 1e-9:
        span = valid[-1].t - valid[0].t if len(valid) >= 2 else 0.0
        raise WindowTooShort(f"stationary window {span:.2f} s shorter than {min_window} s")
    gyro = np.mean([s.gyro for s in valid], axis=0)
    accel = np.mean([s.accel for s in valid], axis=0)
    return gyro, accel - np.asarray(expected_gravity, dtype=float)


class MeasurementQueue:
    """Thread-safe, time-ordered merge of records from several producers.

    Records older than the last released time are dropped and counted.
    """

    def __init__(self):
        self._heap: list = []
        self._seq = itertools.count()
        self._lock = threading.Lock()
        self.last_released = -np.inf
        self.dropped = 0

    def push(self, record) -> bool:
        with self._lock:
            if record.t <= self.last_released:
                self.dropped += 1
                return False
            heapq.heappush(self._heap, (record.t, next(self._seq), record))
            return True

    def extend(self, records: Iterable) -> None:
        for r in records:
            self.push(r)

    def pop_until(self, t: float) -> list:
        out = []
        with self._lock:
            while self._heap and self._heap[0][0] <= t:
                out.append(heapq.heappop(self._heap)[2])
            self.last_released = max(self.last_released, t)
        return out

    def __len__(self):
        return len(self._heap)


@dataclass
class FrontendConfig:
    taps: NDArray = field(default_factory=lambda: moving_average_taps(2))
    hold_ticks: int = 3
    dt: float = 1.0 / IMU_RATE_HZ


class ImuFrontend:
    """Per-tick IMU processing: validity, bias, lever arm, fusion, FIR.

    Angular acceleration for the lever-arm term comes from a central
    difference of the filtered gyro, smoothed by a 3-tap average.
    """

    def __init__(self, mounts: dict[int, MountConfig] | None = None, cfg: FrontendConfig | None = None):
        self.mounts = mounts or {}
        self.cfg = cfg or FrontendConfig()
        n = len(self.cfg.taps)
        self._raw = deque(maxlen=n)
        self._filt_gyro = deque(maxlen=3)
        self._omega_dot_hist = deque(maxlen=3)
        self.omega_dot = np.zeros(3)
        self._last: ImuSample | None = None
        self._held = 0
        self.invalid_count = 0

    @staticmethod
    def _sane(s: ImuSample) -> bool:
        return s.valid and _in_range(s.accel, ACCEL_LIMIT) and _in_range(s.gyro, GYRO_LIMIT)

    def process(self, t: float, samples: Sequence[ImuSample]) -> ImuSample:
        corrected = []
        for s in samples:
            if not self._sane(s):
                self.invalid_count += 1
                continue
            m = self.mounts.get(s.source_id)
            if m is not None:
                s = ImuSample(s.t, s.gyro - m.gyro_bias, s.accel - m.accel_bias, s.source_id)
                if np.any(m.lever_arm):
                    s = lever_arm_correct(s, m, self.omega_dot)
            corrected.append(s)
        if not corrected:
            if self._last is None or self._held >= self.cfg.hold_ticks:
                raise ImuLoss(f"no valid IMU data at t={t:.3f}")
            self._held += 1
            return ImuSample(t, self._last.gyro.copy(), self._last.accel.copy(), -1)
        self._held = 0
        fused = fuse_imus(corrected)
        self._raw.append(np.concatenate([fused.gyro, fused.accel]))
        while len(self._raw) < self._raw.maxlen:
            self._raw.appendleft(self._raw[0])
        f = fir_filter(np.asarray(self._raw), self.cfg.taps)
        out = ImuSample(t, f[:3], f[3:], -1)
        self._update_omega_dot(out.gyro)
        self._last = out
        return out

    def _update_omega_dot(self, gyro: NDArray) -> None:
        self._filt_gyro.append(gyro)
        if len(self._filt_gyro) == 3:
            d = (self._filt_gyro[2] - self._filt_gyro[0]) / (2.0 * self.cfg.dt)
            self._omega_dot_hist.append(d)
            self.omega_dot = np.mean(self._omega_dot_hist, axis=0)
