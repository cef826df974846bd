import json
import math

import numpy as np
import pytest
import yaml

from vdest.ekf3d import EstimatorMode
from vdest.harness import io
from vdest.harness.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, EXIT_THRESHOLD, main
from vdest.harness.config import ConfigError, RunConfig, expand_matrix, load_yaml, merge
from vdest.harness.metrics import EmptyOverlap, align, compute_metrics
from vdest.harness.runner import estimate, run
from vdest.pipeline import PipelineConfig, run_pipeline
from vdest.sim.synth import NoiseConfig
from vdest.virtual_velocity import VelocityProvider

# ---------------------------------------------------------------- config


def test_config_enums_and_validation():
    cfg = RunConfig(mode="planar", provider="kstm")
    assert cfg.mode == EstimatorMode.PLANAR and cfg.provider == VelocityProvider.KSTM
    with pytest.raises(ConfigError):
        RunConfig(mode="sideways")
    with pytest.raises(ConfigError):
        RunConfig(warmup=-1.0)
    with pytest.raises(ConfigError):
        RunConfig(overrides={"ekf": {"no_such_field": 1}})
    with pytest.raises(ConfigError):
        RunConfig(overrides={"gps": {}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"scenari": "lvms_like"})
    with pytest.raises(ConfigError):
        RunConfig(scenario="nowhere.yaml").check_files()
    with pytest.raises(ConfigError):
        RunConfig(overrides={"acor_cfg": {"decay_space": "log"}}).pipeline_config()


def test_config_overrides_reach_pipeline():
    pc = RunConfig(acor=False, ref_angles=False, overrides={"ekf": {"q_yaw": 1e-6}, "ukf": {"v_min": 7.0}}).pipeline_config()
    assert pc.ekf.q_yaw == 1e-6 and pc.ukf.v_min == 7.0
    assert not pc.acor.enabled and not pc.ref.enabled


def test_merge_flags_win_when_given():
    out = merge({"seed": 1, "acor": True}, {"seed": 5, "acor": None, "mode": None})
    assert out == {"seed": 5, "acor": True}


def test_roundtrip_to_dict():
    cfg = RunConfig(mode="planar", seed=3, overrides={"ekf": {"q_yaw": 1e-6}})
    again = RunConfig.from_dict(cfg.to_dict())
    assert again == cfg


def test_expand_matrix():
    runs = expand_matrix({"scenario": "lvms_like"}, {"seed": [1, 2], "provider": ["kstm", "ukf"], "ekf.q_yaw": [1e-8]})
    assert len(runs) == 4
    assert {(r.seed, r.provider.value) for r in runs} == {(1, "kstm"), (1, "ukf"), (2, "kstm"), (2, "ukf")}
    assert all(r.overrides == {"ekf": {"q_yaw": 1e-8}} for r in runs)
    assert len({r.label() for r in runs}) == 4
    with pytest.raises(ConfigError):
        expand_matrix({}, {"seed": 3})


def test_load_yaml_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_yaml(tmp_path / "missing.yaml")
    p = tmp_path / "bad.yaml"
    p.write_text("- just\n- a list\n")
    with pytest.raises(ConfigError):
        load_yaml(p)


# ---------------------------------------------------------------- io


@pytest.fixture(scope="module")
def short_run(lvms):
    streams = lvms.streams(2)
    cfg = RunConfig(seed=2, t_end=8.0, plots=False)
    trace = estimate(cfg, streams=streams, scenario=lvms)
    return streams, trace


def test_streams_roundtrip(short_run, tmp_path):
    streams, _ = short_run
    p = tmp_path / "s.csv"
    io.write_streams(p, streams)
    back = io.read_streams(p)
    assert len(back.imu) == len(streams.imu) and len(back.gnss) == len(streams.gnss)
    for a, b in zip(streams.gnss[:50], back.gnss[:50]):
        assert a.t == b.t and a.source_id == b.source_id and a.rtk_status == b.rtk_status
        np.testing.assert_array_equal(a.p, b.p)
    for a, b in zip(streams.imu[:200], back.imu[:200]):
        np.testing.assert_array_equal(a.accel, b.accel)
    assert back.mounts.keys() == streams.mounts.keys()
    p2 = tmp_path / "s2.csv"
    io.write_streams(p2, back)
    assert p.read_bytes() == p2.read_bytes()


def test_estimate_from_csv_equals_memory(short_run, lvms, tmp_path):
    streams, trace = short_run
    p = tmp_path / "s.csv"
    io.write_streams(p, streams)
    again = estimate(RunConfig(seed=2, t_end=8.0), streams=io.read_streams(p), scenario=lvms)
    np.testing.assert_array_equal(again.x, trace.x)
    np.testing.assert_array_equal(again.flags, trace.flags)


def test_trace_roundtrip(short_run, tmp_path):
    _, trace = short_run
    io.write_trace(tmp_path / "trace.csv", trace)
    io.write_diagnostics(tmp_path / "diagnostics.csv", trace)
    io.write_gate_events(tmp_path / "gate_events.jsonl", trace.gate_events)
    es = io.read_trace(tmp_path / "trace.csv")
    np.testing.assert_array_equal(es.t, trace.t)
    np.testing.assert_array_equal(es.x, trace.x)
    np.testing.assert_array_equal(es.beta[np.isfinite(trace.beta)], trace.beta[np.isfinite(trace.beta)])
    np.testing.assert_array_equal(es.flags, trace.flags)
    np.testing.assert_array_equal(es.n_updates, trace.n_updates)
    assert es.gate_events == trace.gate_events


def test_truth_roundtrip(lvms_truth, tmp_path):
    p = tmp_path / "truth.csv"
    io.write_truth(p, lvms_truth, step=100)
    tr = io.read_truth(p)
    assert tr.dt == pytest.approx(0.1)
    np.testing.assert_array_equal(tr.p, lvms_truth.p[::100])
    np.testing.assert_array_equal(tr.beta, lvms_truth.beta[::100])


def test_format_errors(tmp_path):
    p = tmp_path / "trace.csv"
    p.write_text("t,x\n1,2\n")
    with pytest.raises(io.FormatError):
        io.read_trace(p)
    with pytest.raises(FileNotFoundError):
        io.read_trace(tmp_path / "none.csv")


# ---------------------------------------------------------------- metrics


def _truth_trace(gt, step=8, **kw):
    idx = np.arange(0, len(gt.t), step)
    x = np.hstack([gt.p[idx], gt.angles[idx], gt.v_body[idx]])
    for col, off in kw.items():
        x[:, int(col[1:])] += off
    return io.EstimateSeries(gt.t[idx], x, gt.beta[idx].copy(), np.zeros(len(idx), dtype=np.int64))


def test_metrics_identity(lvms_truth, lvms_track):
    rep = compute_metrics(_truth_trace(lvms_truth, 80), lvms_truth, lvms_track)
    for name, s in rep.signals.items():
        assert s.rmse == pytest.approx(0.0, abs=1e-9), name
        assert s.max == pytest.approx(0.0, abs=1e-9), name
    assert rep.timing is None and rep.max_jump is None


def test_metrics_constant_offset(lvms_truth):
    rep = compute_metrics(_truth_trace(lvms_truth, x7=0.1), lvms_truth)
    assert rep["vy"].rmse == pytest.approx(0.1, rel=1e-12)
    assert rep["vy"].max == pytest.approx(0.1, rel=1e-12)
    assert rep.value("signals.vy.rmse") == rep.value("vy.rmse")
    assert "d_err" not in rep.signals


def test_metrics_angle_wrap(lvms_truth):
    tr = _truth_trace(lvms_truth, 40)
    tr.beta += 2 * math.pi
    assert compute_metrics(tr, lvms_truth)["beta"].max == pytest.approx(0.0, abs=1e-9)


def test_metrics_rmse_below_max(lvms_truth, rng):
    tr = _truth_trace(lvms_truth, 40)
    tr.x += rng.normal(0.0, 0.05, tr.x.shape)
    tr.beta += rng.normal(0.0, 0.01, tr.beta.shape)
    rep = compute_metrics(tr, lvms_truth)
    for s in rep.signals.values():
        assert 0.0 < s.rmse <= s.max


def test_metrics_empty_overlap(lvms_truth):
    tr = _truth_trace(lvms_truth, 400)
    tr.t = tr.t + 1e4
    with pytest.raises(EmptyOverlap):
        compute_metrics(tr, lvms_truth)
    with pytest.raises(EmptyOverlap):
        compute_metrics(_truth_trace(lvms_truth, 400), lvms_truth, t_min=1e6)


def test_align_tolerance():
    t_truth = np.arange(0.0, 1.0001, 0.1)
    k, i = align(np.array([0.0, 0.04, 0.06, 0.5, 2.0]), t_truth, 0.1)
    np.testing.assert_array_equal(k, [0, 1, 2, 3])
    np.testing.assert_array_equal(i, [0, 0, 1, 5])


# ---------------------------------------------------------------- end to end


def test_noiseless_run_is_accurate(lvms):
    streams = lvms.streams(noise=NoiseConfig.noiseless())
    tr = run_pipeline(streams, PipelineConfig(), lvms.vehicle, lvms.track(), t_end=15.0)
    rep = compute_metrics(tr, lvms.truth(), t_min=5.0)
    assert rep["vy"].rmse < 0.05
    assert rep["pos"].rmse < 0.05


def test_run_deterministic_and_writes(tmp_path):
    cfg = RunConfig(seed=4, t_end=7.0, out_dir=str(tmp_path / "a"))
    a = run(cfg)
    b = run(RunConfig(seed=4, t_end=7.0, plots=False), write=False)
    np.testing.assert_array_equal(a.trace.x, b.trace.x)
    for name in ("trace.csv", "diagnostics.csv", "gate_events.jsonl", "metrics.json", "config.yaml",
                 "plot_vy.csv", "plot_roll.csv", "plot_position.csv"):
        assert (a.out_dir / name).exists(), name
    pngs = sorted(p.name for p in a.out_dir.glob("*.png"))
    assert pngs and all((a.out_dir / p).stat().st_size > 1000 for p in pngs)
    m = json.loads((a.out_dir / "metrics.json").read_text())
    assert m["units"]["vy"] == "m/s" and m["signals"]["vy"]["rmse"] == a.report["vy"].rmse


# ---------------------------------------------------------------- CLI


def test_cli_all_then_evaluate(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["all", "--t-end", "6", "--seed", "3", "--no-plots", "--out-dir", str(out)]) == EXIT_OK
    for name in ("streams.csv", "truth.csv", "trace.csv", "metrics.json"):
        assert (out / name).exists()
    ev = tmp_path / "ev"
    code = main(["evaluate", "--trace", str(out / "trace.csv"), "--truth", str(out / "truth.csv"), "--no-plots",
                 "--out-dir", str(ev)])
    assert code == EXIT_OK
    a = json.loads((out / "metrics.json").read_text())["signals"]
    b = json.loads((ev / "metrics.json").read_text())["signals"]
    assert b["vy"]["rmse"] == pytest.approx(a["vy"]["rmse"], rel=1e-12)
    est = tmp_path / "est"
    assert main(["estimate", "--streams", str(out / "streams.csv"), "--t-end", "6", "--out-dir", str(est)]) == EXIT_OK
    assert (est / "trace.csv").read_bytes() == (out / "trace.csv").read_bytes()
    assert "vy rmse=" in capsys.readouterr().out


def test_cli_config_errors(tmp_path, capsys):
    assert main(["all", "--mode", "sideways", "--out-dir", str(tmp_path)]) == EXIT_CONFIG
    assert main(["all", "--scenario", "nowhere", "--out-dir", str(tmp_path)]) == EXIT_CONFIG
    assert main(["estimate", "--streams", str(tmp_path / "none.csv"), "--out-dir", str(tmp_path)]) == EXIT_CONFIG
    assert main(["sweep", "--out-dir", str(tmp_path)]) == EXIT_CONFIG
    assert "error:" in capsys.readouterr().err


def test_cli_runtime_failure(tmp_path, lvms_truth):
    tr = _truth_trace(lvms_truth, 400)
    tr.t = tr.t + 1e4
    p = tmp_path / "trace.csv"
    with open(p, "w") as fh:
        fh.write(",".join(io.TRACE_HEADER) + "\n")
        for k in range(len(tr.t)):
            fh.write(",".join(repr(float(v)) for v in [tr.t[k], *tr.x[k], tr.beta[k]]) + ",0\n")
    assert main(["evaluate", "--trace", str(p), "--no-plots", "--out-dir", str(tmp_path / "o")]) == EXIT_RUNTIME


@pytest.mark.parametrize("limit,code", [(1e-9, EXIT_THRESHOLD), (100.0, EXIT_OK)])
def test_cli_check(tmp_path, capsys, limit, code):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"t_end": 6.0, "seed": 3, "plots": False, "thresholds": {"vy.rmse": limit}}))
    assert main(["all", "--config", str(cfg), "--out-dir", str(tmp_path / "o"), "--check"]) == code
    line = "FAIL vy.rmse" if code else "PASS vy.rmse"
    assert line in capsys.readouterr().out


def test_cli_bad_threshold_key(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"t_end": 6.0, "plots": False, "thresholds": {"vy.median": 1.0}}))
    assert main(["all", "--config", str(cfg), "--out-dir", str(tmp_path / "o"), "--check"]) == EXIT_CONFIG


def test_cli_sweep(tmp_path):
    cfg = tmp_path / "sweep.yaml"
    cfg.write_text(yaml.safe_dump({"t_end": 6.0, "plots": False, "matrix": {"provider": ["kstm", "ukf"]}}))
    assert main(["sweep", "--config", str(cfg), "--workers", "1", "--out-dir", str(tmp_path / "sw")]) == EXIT_OK
    assert (tmp_path / "sw" / "sweep.csv").exists() and (tmp_path / "sw" / "sweep.png").exists()
