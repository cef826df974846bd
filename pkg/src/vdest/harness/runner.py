"""One end-to-end run: scenario, sensors, estimator, metrics, artifacts."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import yaml

from ..pipeline import Trace, run_pipeline
from ..sim.scenario import Scenario, load_scenario
from . import io
from .config import RunConfig
from .metrics import MetricsReport, compute_metrics


@dataclass
class RunResult:
    config: RunConfig
    report: MetricsReport
    trace: Trace
    out_dir: Path | None


def estimate(cfg: RunConfig, streams=None, scenario: Scenario | None = None) -> Trace:
    sc = scenario or load_scenario(cfg.scenario)
    if streams is None:
        streams = sc.streams(cfg.seed)
    return run_pipeline(streams, cfg.pipeline_config(), sc.vehicle, sc.track(), t_end=cfg.t_end)


def evaluate(cfg: RunConfig, trace, truth, track) -> MetricsReport:
    report = compute_metrics(trace, truth, track, t_min=float(trace.t[0]) + cfg.warmup)
    report.extra["run"] = cfg.label()
    return report


def write_trace_files(out: Path, trace: Trace) -> None:
    io.write_trace(out / "trace.csv", trace)
    io.write_diagnostics(out / "diagnostics.csv", trace)
    io.write_gate_events(out / "gate_events.jsonl", trace.gate_events)


def run(cfg: RunConfig, write: bool = True) -> RunResult:
    """Simulate, estimate and score one configuration.

    With ``write`` the trace, diagnostics, gate events, metrics JSON, the
    resolved config and (if ``cfg.plots``) figures land in ``cfg.out_dir``.
    """
    cfg.check_files()
    sc = load_scenario(cfg.scenario)
    truth, track = sc.truth(), sc.track()
    trace = estimate(cfg, scenario=sc)
    report = evaluate(cfg, trace, truth, track)
    out = None
    if write:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_trace_files(out, trace)
        io.write_json(out / "metrics.json", report.to_dict())
        with open(out / "config.yaml", "w") as fh:
            yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
        if cfg.plots:
            from .plotting import render_run

            render_run(out, trace, truth, track, title=cfg.label())
    return RunResult(cfg, report, trace, out)
