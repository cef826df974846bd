"""CSV/JSON artifacts; column layouts are documented in docs/formats.md."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from ..acor import GateEvent
from ..sensors import ActuationSample, GnssFix, ImuSample, MountConfig, RtkStatus, WheelSpeeds
from ..sim.synth import SensorStreams

N_FIELDS = 8
SENSOR_HEADER = ["t", "stream", "source"] + [f"f{i}" for i in range(N_FIELDS)]
TRACE_HEADER = ["t", "px", "py", "pz", "phi", "theta", "psi", "vx", "vy", "vz", "beta", "sigma_flags"]
DIAG_HEADER = (
    ["t", "jump_m", "t_predict_s", "t_update_s", "n_updates", "t_ukf_s", "ref_roll_rad", "ref_pitch_rad", "ref_valid"]
    + [f"sd_{n}" for n in ("px", "py", "pz", "phi", "theta", "psi", "vx", "vy", "vz")]
)
TRUTH_HEADER = ["t", "s", "px", "py", "pz", "phi", "theta", "psi", "vx", "vy", "vz", "beta", "bank", "slope"]


class FormatError(ValueError):
    pass


def _f(v) -> str:
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def _num(s: str) -> float:
    return math.nan if s == "" else float(s)


# ---------------------------------------------------------------- sensor streams


def _sensor_rows(streams: SensorStreams):
    for src, m in sorted(streams.mounts.items()):
        yield 0.0, "mount", src, list(m.lever_arm)
    for r in streams.calibration:
        yield r.t, "imu_cal", r.source_id, [*r.gyro, *r.accel, float(r.valid)]
    merged = []
    for r in streams.imu:
        merged.append((r.t, 0, "imu", r.source_id, [*r.gyro, *r.accel, float(r.valid)]))
    for f in streams.gnss:
        p = [math.nan] * 3 if f.p is None else list(f.p)
        head = math.nan if f.heading is None else f.heading
        merged.append((f.t, 1, "gnss", f.source_id, [*p, *f.sigma, int(f.rtk_status), head]))
    for w in streams.wheels:
        merged.append((w.t, 2, "wheel", 0, [w.fl, w.fr, w.rl, w.rr]))
    for a in streams.actuation:
        merged.append((a.t, 3, "act", 0, [a.steer, a.brake_fl, a.brake_fr, a.brake_rl, a.brake_rr, a.drive]))
    merged.sort(key=lambda r: (r[0], r[1], r[3]))
    for t, _, kind, src, vals in merged:
        yield t, kind, src, vals


def write_streams(path: str | Path, streams: SensorStreams) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SENSOR_HEADER)
        for t, kind, src, vals in _sensor_rows(streams):
            vals = [_f(v) for v in vals]
            w.writerow([_f(t), kind, src] + vals + [""] * (N_FIELDS - len(vals)))


def read_streams(path: str | Path) -> SensorStreams:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"sensor file {path} not found")
    imu, gnss, wheels, act, cal, mounts = [], [], [], [], [], {}
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header != SENSOR_HEADER:
            raise FormatError(f"{path}: expected header {','.join(SENSOR_HEADER)}")
        for ln, row in enumerate(rd, start=2):
            try:
                t, kind, src = float(row[0]), row[1], int(row[2])
                f = [_num(x) for x in row[3:]]
            except (ValueError, IndexError) as e:
                raise FormatError(f"{path}:{ln}: {e}") from e
            if kind in ("imu", "imu_cal"):
                rec = ImuSample(t, np.array(f[0:3]), np.array(f[3:6]), src, bool(f[6]))
                (imu if kind == "imu" else cal).append(rec)
            elif kind == "gnss":
                p = None if math.isnan(f[0]) else np.array(f[0:3])
                head = None if math.isnan(f[7]) else f[7]
                gnss.append(GnssFix(t, p, np.array(f[3:6]), RtkStatus(int(f[6])), head, src))
            elif kind == "wheel":
                wheels.append(WheelSpeeds(t, *f[0:4]))
            elif kind == "act":
                act.append(ActuationSample(t, *f[0:6]))
            elif kind == "mount":
                mounts[src] = MountConfig(lever_arm=np.array(f[0:3]))
            else:
                raise FormatError(f"{path}:{ln}: unknown stream {kind!r}")
    return SensorStreams(imu, gnss, wheels, act, cal, mounts)


# ---------------------------------------------------------------- estimate trace


@dataclass
class EstimateSeries:
    """Estimator output as read back from disk."""

    t: NDArray
    x: NDArray  # (N, 9)
    beta: NDArray
    flags: NDArray
    jump: NDArray | None = None
    t_predict: NDArray | None = None
    t_update: NDArray | None = None
    t_ukf: NDArray | None = None
    n_updates: NDArray | None = None
    gate_events: list | None = None


def write_trace(path: str | Path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for k in range(len(trace.t)):
            w.writerow([_f(trace.t[k])] + [_f(v) for v in trace.x[k]] + [_f(trace.beta[k]), int(trace.flags[k])])


def write_diagnostics(path: str | Path, trace) -> None:
    sd = np.sqrt(np.maximum(trace.p_diag, 0.0))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DIAG_HEADER)
        for k in range(len(trace.t)):
            w.writerow(
                [_f(trace.t[k]), _f(trace.jump[k]), _f(trace.t_predict[k]), _f(trace.t_update[k]),
                 int(trace.n_updates[k]), _f(trace.t_ukf[k]), _f(trace.ref[k, 0]), _f(trace.ref[k, 1]),
                 int(trace.ref[k, 2])]
                + [_f(v) for v in sd[k]]
            )


def _read_table(path: Path, header: list[str]) -> NDArray:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found")
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        got = next(rd, None)
        if got != header:
            raise FormatError(f"{path}: expected header {','.join(header)}")
        try:
            rows = [[_num(x) for x in row] for row in rd]
        except ValueError as e:
            raise FormatError(f"{path}: {e}") from e
    return np.array(rows, dtype=float).reshape(-1, len(header))


def read_trace(path: str | Path) -> EstimateSeries:
    """Trace CSV, plus diagnostics.csv and gate_events.jsonl when found beside it."""
    path = Path(path)
    a = _read_table(path, TRACE_HEADER)
    es = EstimateSeries(a[:, 0], a[:, 1:10], a[:, 10], a[:, 11].astype(np.int64))
    diag = path.with_name("diagnostics.csv")
    if diag.exists():
        d = _read_table(diag, DIAG_HEADER)
        if len(d) == len(a):
            es.jump, es.t_predict, es.t_update = d[:, 1], d[:, 2], d[:, 3]
            es.n_updates, es.t_ukf = d[:, 4].astype(np.int64), d[:, 5]
    gates = path.with_name("gate_events.jsonl")
    if gates.exists():
        es.gate_events = read_gate_events(gates)
    return es


def write_gate_events(path: str | Path, events) -> None:
    with open(path, "w") as fh:
        for e in events:
            fh.write(json.dumps(asdict(e)) + "\n")


def read_gate_events(path: str | Path) -> list[GateEvent]:
    with open(path) as fh:
        return [GateEvent(**json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------- ground truth


@dataclass
class TruthSeries:
    t: NDArray
    s: NDArray
    p: NDArray
    angles: NDArray
    v_body: NDArray
    beta: NDArray
    bank: NDArray
    slope: NDArray
    dt: float


def write_truth(path: str | Path, gt, step: int = 1) -> None:
    idx = np.arange(0, len(gt.t), step)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRUTH_HEADER)
        for i in idx:
            w.writerow(
                [_f(gt.t[i]), _f(gt.s[i])] + [_f(v) for v in gt.p[i]] + [_f(v) for v in gt.angles[i]]
                + [_f(v) for v in gt.v_body[i]] + [_f(gt.beta[i]), _f(gt.bank[i]), _f(gt.slope[i])]
            )


def read_truth(path: str | Path) -> TruthSeries:
    a = _read_table(Path(path), TRUTH_HEADER)
    if len(a) < 2:
        raise FormatError(f"{path}: ground truth needs at least two samples")
    dt = float(np.median(np.diff(a[:, 0])))
    return TruthSeries(a[:, 0], a[:, 1], a[:, 2:5], a[:, 5:8], a[:, 8:11], a[:, 11], a[:, 12], a[:, 13], dt)


def write_json(path: str | Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False, allow_nan=False)
        fh.write("\n")
