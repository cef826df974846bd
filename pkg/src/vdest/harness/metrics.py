"""Error statistics of an estimate trace against ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from ..core_math import frenet_project_many, wrap_angle

SCHEMA_VERSION = 1

SIGNALS = ("vx", "vy", "beta", "theta", "phi", "d_err", "pos")
UNITS = {
    "vx": "m/s", "vy": "m/s", "beta": "deg", "theta": "deg", "phi": "deg", "d_err": "m", "pos": "m",
    "max_jump": "m", "timing": "us",
}
_ANGLES = {"beta", "theta", "phi"}


class EmptyOverlap(ValueError):
    """No estimate sample has a ground-truth sample within half a tick."""


@dataclass
class SignalStats:
    rmse: float
    max: float
    unit: str

    def to_dict(self) -> dict:
        return {"rmse": self.rmse, "max": self.max, "unit": self.unit}


@dataclass
class MetricsReport:
    signals: dict[str, SignalStats]
    n_samples: int
    t_range: tuple[float, float]
    gate_events: int | None = None
    max_jump: float | None = None
    timing: dict | None = None
    extra: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> SignalStats:
        return self.signals[name]

    def to_dict(self) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "units": {k: UNITS[k] for k in (*self.signals, "max_jump", "timing")},
            "n_samples": self.n_samples,
            "t_range_s": list(self.t_range),
            "signals": {k: v.to_dict() for k, v in self.signals.items()},
            "gate_events": self.gate_events,
            "max_jump_m": self.max_jump,
            "timing_us": self.timing,
        }
        d.update(self.extra)
        return d

    def value(self, path: str) -> float:
        """Look up ``signals.vy.rmse``-style or ``vy.rmse`` paths."""
        parts = path.split(".")
        if parts[0] == "signals":
            parts = parts[1:]
        if len(parts) == 2 and parts[0] in self.signals:
            return float(getattr(self.signals[parts[0]], parts[1]))
        d = self.to_dict()
        for p in path.split("."):
            d = d[p]
        return float(d)


def align(t_est: NDArray, t_truth: NDArray, dt_truth: float) -> tuple[NDArray, NDArray]:
    """Nearest truth sample for every estimate sample; drops those farther than dt/2.

    Returns (estimate indices, truth indices).
    """
    t_est = np.asarray(t_est, dtype=float)
    t_truth = np.asarray(t_truth, dtype=float)
    j = np.clip(np.searchsorted(t_truth, t_est), 1, len(t_truth) - 1)
    left = t_truth[j - 1]
    right = t_truth[j]
    j = np.where(np.abs(t_est - left) <= np.abs(right - t_est), j - 1, j)
    ok = np.abs(t_truth[j] - t_est) <= 0.5 * dt_truth + 1e-9
    return np.nonzero(ok)[0], j[ok]


def _stats(e: NDArray, unit: str) -> SignalStats:
    a = np.abs(e)
    return SignalStats(float(np.sqrt(np.mean(e * e))), float(np.max(a)), unit)


def compute_metrics(trace, truth, track=None, t_min: float | None = None, gate_events=None) -> MetricsReport:
    """RMSE and MAX per signal plus the run diagnostics carried by the trace.

    ``trace`` needs ``t``, ``x`` (N, 9) and ``beta``; ``jump``, timing
    columns and ``gate_events`` are used when present. ``truth`` needs
    ``t``, ``p``, ``angles``, ``v_body``, ``beta`` and ``dt``. Angle errors
    are wrapped to (-pi, pi] and reported in degrees. ``d_err`` (the
    track-orthogonal position error) needs ``track``.
    """
    k, i = align(trace.t, truth.t, truth.dt)
    if t_min is not None:
        keep = trace.t[k] >= t_min
        k, i = k[keep], i[keep]
    if len(k) == 0:
        raise EmptyOverlap("estimate and ground truth share no samples")
    x = trace.x[k]
    err = {
        "vx": x[:, 6] - truth.v_body[i, 0],
        "vy": x[:, 7] - truth.v_body[i, 1],
        "beta": np.degrees(wrap_angle(trace.beta[k] - truth.beta[i])),
        "theta": np.degrees(wrap_angle(x[:, 4] - truth.angles[i, 1])),
        "phi": np.degrees(wrap_angle(x[:, 3] - truth.angles[i, 0])),
    }
    if track is not None:
        _, d_est = frenet_project_many(track, x[:, :3])
        _, d_true = frenet_project_many(track, truth.p[i])
        err["d_err"] = d_est - d_true
    err["pos"] = np.hypot(x[:, 0] - truth.p[i, 0], x[:, 1] - truth.p[i, 1])
    signals = {name: _stats(e, UNITS[name]) for name, e in err.items()}

    jump = getattr(trace, "jump", None)
    max_jump = float(np.nanmax(jump[k])) if jump is not None else None
    events = gate_events if gate_events is not None else getattr(trace, "gate_events", None)
    return MetricsReport(
        signals, len(k), (float(trace.t[k[0]]), float(trace.t[k[-1]])),
        None if events is None else len(events), max_jump, timing_stats(trace, k),
    )


def timing_stats(trace, k: NDArray | None = None) -> dict | None:
    """Per-step wall-clock statistics in microseconds.

    ``ekf_step_mean`` is one predict plus one update: the mean predict
    time plus total update time over the number of updates.
    """
    tp = getattr(trace, "t_predict", None)
    if tp is None:
        return None
    k = np.arange(len(tp)) if k is None else k
    tp, tu, n = tp[k], trace.t_update[k], trace.n_updates[k]
    per_update = tu.sum() / n.sum() if n.sum() else 0.0
    tick = (tp + tu) * 1e6
    ukf = trace.t_ukf[k]
    ukf = ukf[np.isfinite(ukf)] * 1e6
    out = {
        "ekf_step_mean": float((tp.mean() + per_update) * 1e6),
        "ekf_predict_mean": float(tp.mean() * 1e6),
        "ekf_update_mean": float(per_update * 1e6),
        "ekf_tick_median": float(np.median(tick)),
        "ekf_tick_p99": float(np.percentile(tick, 99)),
        "ekf_tick_max": float(tick.max()),
        "ukf_step_mean": float(ukf.mean()) if len(ukf) else None,
        "ukf_step_median": float(np.median(ukf)) if len(ukf) else None,
        "ukf_step_p99": float(np.percentile(ukf, 99)) if len(ukf) else None,
    }
    return out
