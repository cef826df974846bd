"""Command line: simulate, estimate, evaluate, sweep, all.

Exit codes: 0 success, 1 configuration or input error, 2 estimation
failure, 3 a metric exceeded its threshold (``--check``).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from ..sim.scenario import load_scenario
from . import io
from .config import ConfigError, RunConfig, expand_matrix, load_yaml, merge
from .metrics import SIGNALS

log = logging.getLogger("vdest")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_THRESHOLD = 0, 1, 2, 3

# flags that mirror RunConfig keys
_RUN_KEYS = ("scenario", "mode", "provider", "acor", "ref_angles", "out_dir", "seed", "warmup", "t_end", "plots")


class ThresholdViolation(RuntimeError):
    pass


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file with RunConfig keys; flags given here override it")
    p.add_argument("--scenario", help="stock name (lvms_like, monza_like) or scenario YAML path")
    p.add_argument("--mode", help="full_3d, planar, planar_with_bank_map or threed_with_angle_map")
    p.add_argument("--provider", help="velocity provider: none, nonholonomic, kstm or ukf")
    p.add_argument("--acor", action=argparse.BooleanOptionalAction, default=None, help="adaptive covariance and gating")
    p.add_argument("--ref-angles", action=argparse.BooleanOptionalAction, default=None, help="reference angle updates")
    p.add_argument("--out-dir", help="output directory")
    p.add_argument("--seed", type=int, help="noise seed (default: the scenario's)")
    p.add_argument("--warmup", type=float, help="seconds excluded from metrics after initialization")
    p.add_argument("--t-end", type=float, help="stop the estimator at this time")
    p.add_argument("--plots", action=argparse.BooleanOptionalAction, default=None, help="render PNG figures")
    p.add_argument("--check", action="store_true", help="exit 3 when a configured threshold is exceeded")


def _resolve(args) -> tuple[RunConfig, dict]:
    raw = load_yaml(args.config) if args.config else {}
    extra = {k: raw.pop(k) for k in ("matrix", "summary") if k in raw}
    flags = {k: getattr(args, k, None) for k in _RUN_KEYS}
    return RunConfig.from_dict(merge(raw, flags)), extra


def _check(report, thresholds: dict) -> None:
    bad = []
    for path, limit in thresholds.items():
        try:
            v = report.value(path)
        except (AttributeError, KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"threshold key {path!r} does not name a metric") from e
        ok = v <= float(limit)
        print(f"{'PASS' if ok else 'FAIL'} {path} = {v:.6g} (limit {limit})")
        if not ok:
            bad.append(path)
    if bad:
        raise ThresholdViolation(f"threshold exceeded: {', '.join(bad)}")


def _summary_line(report) -> str:
    s = report.signals
    return "  ".join(f"{k} rmse={s[k].rmse:.4g}{s[k].unit}" for k in SIGNALS if k in s)


# ---------------------------------------------------------------- verbs


def cmd_simulate(args) -> None:
    cfg, _ = _resolve(args)
    cfg.check_files()
    sc = load_scenario(cfg.scenario)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    streams = sc.streams(cfg.seed)
    io.write_streams(out / "streams.csv", streams)
    io.write_truth(out / "truth.csv", sc.truth())
    io.write_json(out / "scenario.json", {"scenario": cfg.scenario, "seed": sc.seed if cfg.seed is None else cfg.seed})
    print(f"wrote {out / 'streams.csv'} ({len(streams.imu)} IMU, {len(streams.gnss)} GNSS records) and truth.csv")


def cmd_estimate(args) -> None:
    from .runner import estimate, write_trace_files

    cfg, _ = _resolve(args)
    cfg.check_files()
    streams = io.read_streams(args.streams)
    trace = estimate(cfg, streams=streams)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_trace_files(out, trace)
    ekf, ukf = trace.step_time(skip=min(200, len(trace) // 2))
    print(f"wrote {out / 'trace.csv'} ({len(trace)} ticks); ekf step {ekf * 1e6:.1f} us, ukf step {ukf * 1e6:.1f} us")


def cmd_evaluate(args) -> None:
    from .runner import evaluate

    cfg, _ = _resolve(args)
    cfg.check_files()
    sc = load_scenario(cfg.scenario)
    trace = io.read_trace(args.trace)
    truth = io.read_truth(args.truth) if args.truth else sc.truth()
    track = sc.track()
    report = evaluate(cfg, trace, truth, track)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "metrics.json", report.to_dict())
    if cfg.plots:
        from .plotting import render_run

        render_run(out, trace, truth, track, title=cfg.label())
    print(_summary_line(report))
    if args.check:
        _check(report, cfg.thresholds)


def cmd_all(args) -> None:
    from .runner import run

    cfg, _ = _resolve(args)
    res = run(cfg)
    sc = load_scenario(cfg.scenario)
    io.write_streams(res.out_dir / "streams.csv", sc.streams(cfg.seed))
    io.write_truth(res.out_dir / "truth.csv", sc.truth())
    print(_summary_line(res.report))
    t = res.report.timing
    print(f"ekf step {t['ekf_step_mean']:.1f} us, ukf step {t['ukf_step_mean'] or float('nan'):.1f} us")
    if args.check:
        _check(res.report, cfg.thresholds)


def _sweep_worker(d: dict) -> dict:
    from .runner import run

    cfg = RunConfig.from_dict(d)
    res = run(cfg, write=True)
    rep = res.report.to_dict()
    row = {"run": cfg.label(), **{k: v for k, v in cfg.to_dict().items() if k not in ("overrides", "thresholds")}}
    for name, st in rep["signals"].items():
        row[f"{name}_rmse"] = st["rmse"]
        row[f"{name}_max"] = st["max"]
    row["gate_events"] = rep["gate_events"]
    row["max_jump_m"] = rep["max_jump_m"]
    if rep["timing_us"]:
        row["ekf_step_us"] = rep["timing_us"]["ekf_step_mean"]
        row["ukf_step_us"] = rep["timing_us"]["ukf_step_mean"]
    for sec, fields in sorted(cfg.overrides.items()):
        for k, v in sorted(fields.items()):
            row[f"{sec}.{k}"] = v
    return row


def cmd_sweep(args) -> None:
    cfg, extra = _resolve(args)
    matrix = extra.get("matrix")
    if not matrix:
        raise ConfigError("sweep needs a 'matrix' mapping in the config file")
    base = cfg.to_dict()
    runs = expand_matrix(base, matrix)
    root = Path(cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    jobs = []
    for r in runs:
        r.out_dir = str(root / r.label())
        r.check_files()
        jobs.append(r.to_dict())
    workers = args.workers or None
    print(f"sweep: {len(jobs)} runs")
    if workers == 1:
        rows = [_sweep_worker(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_sweep_worker, jobs))
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(root / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    metric = extra.get("summary", "vy_rmse")
    if metric not in keys:
        raise ConfigError(f"summary metric {metric!r} not among sweep columns")
    # group over seeds
    groups: dict[str, list[float]] = {}
    for r, j in zip(rows, runs):
        key = RunConfig.from_dict({**j.to_dict(), "seed": None}).label()
        groups.setdefault(key, []).append(float(r[metric]))
    summary = {k: float(np.mean(v)) for k, v in groups.items()}
    io.write_json(root / "sweep.json", {"schema_version": 1, "metric": metric, "mean_over_seeds": summary, "runs": rows})
    from .plotting import render_sweep

    render_sweep(root / "sweep.png", list(summary), list(summary.values()), metric)
    for k, v in sorted(summary.items(), key=lambda kv: kv[1]):
        print(f"{v:10.5f}  {k}")


# ---------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vdest", description="3D vehicle state estimation: simulate, estimate, evaluate")
    ap.add_argument("--log-level", default="WARNING", help="logging level (DEBUG, INFO, WARNING)")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("simulate", help="scenario -> sensor streams CSV and truth CSV")
    _add_run_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="sensor streams CSV -> estimate trace CSV")
    _add_run_flags(p)
    p.add_argument("--streams", required=True, help="sensor stream CSV written by simulate")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("evaluate", help="trace CSV + ground truth -> metrics JSON and figures")
    _add_run_flags(p)
    p.add_argument("--trace", required=True, help="trace CSV written by estimate")
    p.add_argument("--truth", help="truth CSV written by simulate (default: regenerate from the scenario)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="config matrix -> combined report")
    _add_run_flags(p)
    p.add_argument("--workers", type=int, help="worker processes (default: CPU count)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("all", help="simulate, estimate and evaluate in one go")
    _add_run_flags(p)
    p.set_defaults(func=cmd_all)
    return ap


def main(argv: list[str] | None = None) -> int:
    from ..core_math import OutOfCorridor
    from .io import FormatError
    from .metrics import EmptyOverlap

    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, FormatError, FileNotFoundError, yaml.YAMLError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ThresholdViolation as e:
        print(f"check failed: {e}", file=sys.stderr)
        return EXIT_THRESHOLD
    except (EmptyOverlap, OutOfCorridor, ArithmeticError, RuntimeError, ValueError, np.linalg.LinAlgError) as e:
        print(f"estimation failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
