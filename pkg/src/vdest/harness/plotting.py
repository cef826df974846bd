"""Plot-data CSVs and matplotlib figures for one run or a sweep."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..pipeline import F_DECAY, F_DROPOUT  # noqa: E402
from .metrics import align  # noqa: E402

plt.rcParams.update({"figure.dpi": 110, "axes.grid": True, "grid.alpha": 0.3, "font.size": 9})


def _write(path: Path, header: list[str], cols) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*cols):
            w.writerow(["" if not np.isfinite(v) else repr(float(v)) for v in row])


def _series(trace, truth, track=None) -> dict:
    k, i = align(trace.t, truth.t, truth.dt)
    t = trace.t[k]
    ref = getattr(trace, "ref", None)
    out = {
        "t": t,
        "vy_est": trace.x[k, 7],
        "vy_true": truth.v_body[i, 1],
        "phi_est": np.degrees(trace.x[k, 3]),
        "phi_true": np.degrees(truth.angles[i, 0]),
        "phi_ref": np.degrees(np.where(ref[k, 2] > 0, ref[k, 0], np.nan)) if ref is not None else np.full(len(k), np.nan),
        "bank_track": np.degrees(track.bank(truth.s[i])) if track is not None else np.full(len(k), np.nan),
        "pos_err": np.hypot(trace.x[k, 0] - truth.p[i, 0], trace.x[k, 1] - truth.p[i, 1]),
        "jump": trace.jump[k] if getattr(trace, "jump", None) is not None else np.full(len(k), np.nan),
        "flags": trace.flags[k],
    }
    return out


def write_plot_data(out_dir: str | Path, trace, truth, track=None) -> dict:
    """Time series behind the figures, one CSV per figure (units in headers)."""
    out = Path(out_dir)
    s = _series(trace, truth, track)
    _write(out / "plot_vy.csv", ["t_s", "vy_est_mps", "vy_true_mps"], [s["t"], s["vy_est"], s["vy_true"]])
    _write(
        out / "plot_roll.csv", ["t_s", "phi_est_deg", "phi_true_deg", "phi_ref_deg", "bank_track_deg"],
        [s["t"], s["phi_est"], s["phi_true"], s["phi_ref"], s["bank_track"]],
    )
    _write(
        out / "plot_position.csv", ["t_s", "pos_err_m", "jump_m", "dropout", "decay"],
        [s["t"], s["pos_err"], s["jump"], (s["flags"] & F_DROPOUT) > 0, (s["flags"] & F_DECAY) > 0],
    )
    return s


def _shade(ax, t, mask, color, label):
    if not np.any(mask):
        return
    edges = np.flatnonzero(np.diff(np.concatenate([[0], mask.astype(int), [0]])))
    for a, b in zip(edges[::2], edges[1::2]):
        ax.axvspan(t[a], t[b - 1], color=color, alpha=0.15, lw=0, label=label)
        label = None


def render_run(out_dir: str | Path, trace, truth, track=None, title: str = "") -> list[Path]:
    """Lateral velocity, roll and position-error figures; returns the PNG paths."""
    out = Path(out_dir)
    s = write_plot_data(out, trace, truth, track)
    t = s["t"]
    paths = []

    fig, ax = plt.subplots(figsize=(8, 3))
    ax.plot(t, s["vy_true"], "k", lw=1.0, label="truth")
    ax.plot(t, s["vy_est"], "C0", lw=0.8, label="estimate")
    ax.set(xlabel="t [s]", ylabel="$v_y$ [m/s]", title=title)
    ax.legend(loc="upper right")
    fig.tight_layout()
    paths.append(out / "vy.png")
    fig.savefig(paths[-1])
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(8, 3))
    ax.plot(t, s["phi_true"], "k", lw=1.0, label="truth")
    if np.any(np.isfinite(s["bank_track"])):
        ax.plot(t, s["bank_track"], "k--", lw=0.8, label="track bank")
    ax.plot(t, s["phi_ref"], ".", color="C1", ms=1, label="reference")
    ax.plot(t, s["phi_est"], "C0", lw=0.8, label="estimate")
    ax.set(xlabel="t [s]", ylabel=r"$\phi$ [deg]", title=title)
    ax.legend(loc="upper right", markerscale=6)
    fig.tight_layout()
    paths.append(out / "roll.png")
    fig.savefig(paths[-1])
    plt.close(fig)

    fig, (a1, a2) = plt.subplots(2, 1, figsize=(8, 4.5), sharex=True)
    a1.plot(t, s["pos_err"], "C0", lw=0.8)
    a1.set(ylabel="horizontal error [m]", title=title)
    a2.plot(t, s["jump"], "C3", lw=0.8)
    a2.set(xlabel="t [s]", ylabel="posterior jump [m]")
    for ax in (a1, a2):
        _shade(ax, t, (s["flags"] & F_DROPOUT) > 0, "C7", "dropout")
        _shade(ax, t, (s["flags"] & F_DECAY) > 0, "C2", "decay")
    if a1.get_legend_handles_labels()[0]:
        a1.legend(loc="upper right")
    fig.tight_layout()
    paths.append(out / "position.png")
    fig.savefig(paths[-1])
    plt.close(fig)
    return paths


def render_sweep(path: str | Path, labels: list[str], values: list[float], ylabel: str) -> Path:
    fig, ax = plt.subplots(figsize=(max(4.0, 0.5 * len(labels) + 2.0), 3.5))
    ax.bar(range(len(labels)), values, color="C0")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)
