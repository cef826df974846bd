"""GNSS signal-quality handling in front of the EKF position update.

Two mechanisms: after a dropout the measurement standard deviation decays
linearly from a hold value to the receiver's reported one, so the estimate
slides onto the recovered signal instead of jumping; and position
innovations are clamped per axis in the vehicle frame against a
Mahalanobis limit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .core_math import rot_z
from .sensors import GnssFix, RtkStatus

log = logging.getLogger(__name__)


class Phase(Enum):
    NORMAL = "normal"
    DROPOUT = "dropout"
    DECAY = "decay"


@dataclass
class GateConfig:
    d_lon: float = 5.0
    d_lat: float = 5.0

    def __post_init__(self):
        if self.d_lon <= 0 or self.d_lat <= 0:
            raise ValueError("gate limits must be positive")


@dataclass
class AcorConfig:
    enabled: bool = True
    gate_enabled: bool = True
    gate: GateConfig = field(default_factory=GateConfig)
    entry_sigma: float = 0.5
    entry_count: int = 3
    exit_sigma: float = 0.05
    decay_duration: float = 5.0
    decay_space: str = "sigma"  # quantity decayed linearly: "variance" or "sigma"
    gap_timeout: float = 0.5
    # no gating right after initialization, while S still understates the
    # spread of a filter converging from its prior
    gate_warmup: float = 5.0
    # hold value: max(hold_factor * EKF position std, hold_floor) per axis
    hold_factor: float = 1.0
    hold_floor: float = 1.5
    # without ACOR, fixes above this sigma are discarded
    plain_max_sigma: float = 0.5

    def __post_init__(self):
        if self.decay_duration <= 0:
            raise ValueError("decay_duration must be positive")
        if self.decay_space not in ("variance", "sigma"):
            raise ValueError(f"unknown decay_space {self.decay_space!r}")


@dataclass
class GnssQualityTracker:
    """Per-receiver dropout/recovery state machine."""

    decay_duration: float = 5.0
    last_sigma: NDArray = field(default_factory=lambda: np.zeros(3))
    phase: Phase = Phase.NORMAL
    recovery_start_t: float = -math.inf
    sigma_hold: NDArray = field(default_factory=lambda: np.zeros(3))
    last_fix_t: float = -math.inf
    bad_count: int = 0

    @property
    def dropout_active(self) -> bool:
        return self.phase == Phase.DROPOUT


def _decayed(tr: GnssQualityTracker, sigma: NDArray, t: float, space: str = "sigma") -> NDArray:
    frac = min(max((t - tr.recovery_start_t) / tr.decay_duration, 0.0), 1.0)
    if space == "sigma":
        return np.maximum(tr.sigma_hold + frac * (sigma - tr.sigma_hold), sigma)
    var = tr.sigma_hold**2 + frac * (sigma**2 - tr.sigma_hold**2)
    return np.sqrt(np.maximum(var, sigma**2))


def adapt_sigma(
    tr: GnssQualityTracker,
    sigma_reported: ArrayLike | None,
    t: float,
    status: RtkStatus = RtkStatus.RTK_FIXED,
    cfg: AcorConfig | None = None,
    ekf_pos_std: ArrayLike | None = None,
) -> NDArray | None:
    """Measurement standard deviation to use for a fix, or None to drop it.

    ``sigma_reported=None`` means the receiver produced no position.
    """
    cfg = cfg or AcorConfig()
    gap = t - tr.last_fix_t > cfg.gap_timeout and np.isfinite(tr.last_fix_t)
    if sigma_reported is None or status == RtkStatus.NONE:
        tr.bad_count += 1
        if tr.bad_count >= cfg.entry_count and tr.phase != Phase.DROPOUT:
            tr.phase = Phase.DROPOUT
        return None
    sigma = np.broadcast_to(np.asarray(sigma_reported, dtype=float), (3,)).copy()
    tr.last_sigma = sigma
    tr.last_fix_t = t
    bad = status != RtkStatus.RTK_FIXED or np.max(sigma) > cfg.entry_sigma
    good = status == RtkStatus.RTK_FIXED and np.max(sigma) < cfg.exit_sigma
    if gap and tr.phase != Phase.DROPOUT:
        tr.phase = Phase.DROPOUT
    if bad:
        tr.bad_count += 1
        if tr.bad_count >= cfg.entry_count:
            tr.phase = Phase.DROPOUT
    else:
        tr.bad_count = 0
    if tr.phase == Phase.DROPOUT:
        if not good:
            return None
        tr.phase = Phase.DECAY
        tr.recovery_start_t = t
        base = np.zeros(3) if ekf_pos_std is None else cfg.hold_factor * np.asarray(ekf_pos_std, dtype=float)
        tr.sigma_hold = np.maximum(np.maximum(base, cfg.hold_floor), sigma)
        log.debug("GNSS recovery at t=%.3f, hold sigma %s", t, tr.sigma_hold)
    if tr.phase == Phase.DECAY:
        if t - tr.recovery_start_t >= tr.decay_duration:
            tr.phase = Phase.NORMAL
            return sigma
        return _decayed(tr, sigma, t, cfg.decay_space)
    return sigma


@dataclass
class GateResult:
    innovation: NDArray
    clamped: bool
    distance: NDArray  # per-axis (lon, lat) before clamping
    axes: tuple


def mahalanobis_gate(innovation_nav: ArrayLike, S: ArrayLike, yaw: float, cfg: GateConfig | None = None) -> GateResult:
    """Clamp a position innovation per axis in the vehicle frame.

    The horizontal part is rotated by -yaw; the longitudinal and lateral
    components whose marginal Mahalanobis distance exceeds its limit are
    scaled onto the limit. The vertical component is passed through.
    """
    cfg = cfg or GateConfig()
    y = np.asarray(innovation_nav, dtype=float).copy()
    S = np.asarray(S, dtype=float)
    Rv = rot_z(-yaw)[: len(y), : len(y)]
    yv = Rv @ y
    Sv = Rv @ S @ Rv.T
    dist = np.abs(yv[:2]) / np.sqrt(np.diag(Sv)[:2])
    limits = (cfg.d_lon, cfg.d_lat)
    axes = []
    for i, name in enumerate(("lon", "lat")):
        if dist[i] > limits[i]:
            yv[i] *= limits[i] / dist[i]
            axes.append(name)
    if not axes:
        return GateResult(y, False, dist, ())
    return GateResult(Rv.T @ yv, True, dist, tuple(axes))


@dataclass
class GateEvent:
    t: float
    distance: float
    axis: str
    source: int


class Acor:
    """Owns one quality tracker per GNSS source plus the gate event log."""

    def __init__(self, cfg: AcorConfig | None = None):
        self.cfg = cfg or AcorConfig()
        self.trackers: dict[int, GnssQualityTracker] = {}
        self.gate_events: list[GateEvent] = []
        self.t_start: float | None = None

    def start(self, t: float) -> None:
        """Mark filter initialization; opens the gate warm-up window."""
        self.t_start = t

    def tracker(self, source: int) -> GnssQualityTracker:
        if source not in self.trackers:
            self.trackers[source] = GnssQualityTracker(self.cfg.decay_duration)
        return self.trackers[source]

    def position_sigma(self, fix: GnssFix, ekf_pos_std: ArrayLike | None = None) -> NDArray | None:
        """Standard deviation for a fix's position packet, None to skip it."""
        if not self.cfg.enabled:
            if fix.p is None or fix.rtk_status == RtkStatus.NONE:
                return None
            sigma = np.broadcast_to(np.asarray(fix.sigma, dtype=float), (3,))
            return None if np.max(sigma) > self.cfg.plain_max_sigma else sigma.copy()
        return adapt_sigma(
            self.tracker(fix.source_id),
            None if fix.p is None else fix.sigma,
            fix.t,
            fix.rtk_status,
            self.cfg,
            ekf_pos_std,
        )

    def gate(self, innovation_nav: NDArray, S: NDArray, yaw: float, t: float, source: int = 0) -> NDArray | None:
        """Clamped innovation, or None when the gate did not engage."""
        if not (self.cfg.enabled and self.cfg.gate_enabled):
            return None
        if self.t_start is not None and t < self.t_start + self.cfg.gate_warmup:
            return None
        res = mahalanobis_gate(innovation_nav, S, yaw, self.cfg.gate)
        if not res.clamped:
            return None
        # one record per gated fix; axis lists every clamped direction
        axis = "+".join(res.axes)
        d = float(np.max(res.distance))
        self.gate_events.append(GateEvent(t, d, axis, source))
        log.info("gate engaged t=%.3f axis=%s distance=%.2f", t, axis, d)
        return res.innovation
