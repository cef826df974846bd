"""Run configuration: YAML file keys mirrored by CLI flags."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..acor import AcorConfig
from ..ekf3d import EkfConfig, EstimatorMode, RefAngleConfig
from ..pipeline import PipelineConfig
from ..sim.scenario import STOCK
from ..sideslip_ukf import UkfConfig
from ..virtual_velocity import VelocityProvider, VirtualVelocityConfig


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (exit code 1)."""


# sub-config sections that may be overridden field by field
_SECTIONS = {
    "ekf": EkfConfig,
    "ref": RefAngleConfig,
    "ukf": UkfConfig,
    "acor_cfg": AcorConfig,
    "velocity": VirtualVelocityConfig,
}


def _enum(cls, value, what):
    if isinstance(value, cls):
        return value
    key = str(value).strip()
    for m in cls:
        if key.upper() == m.name or key.lower() == str(m.value).lower():
            return m
    names = ", ".join(m.name.lower() for m in cls)
    raise ConfigError(f"unknown {what} {value!r}; choose one of: {names}")


@dataclass
class RunConfig:
    """One estimator run on one scenario.

    ``overrides`` holds per-section field overrides, e.g.
    ``{"ekf": {"q_rollpitch": 1e-7}}``; sections are ekf, ref, ukf,
    acor_cfg and velocity.
    """

    scenario: str = "lvms_like"
    mode: EstimatorMode = EstimatorMode.FULL_3D
    provider: VelocityProvider = VelocityProvider.UKF
    acor: bool = True
    ref_angles: bool = True
    out_dir: str = "out"
    seed: int | None = None  # None: the scenario's own seed
    warmup: float = 5.0  # seconds excluded from the metrics
    t_end: float | None = None
    plots: bool = True
    overrides: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)  # metric path -> upper limit, for --check

    def __post_init__(self):
        self.mode = _enum(EstimatorMode, self.mode, "estimator mode")
        self.provider = _enum(VelocityProvider, self.provider, "velocity provider")
        if self.seed is not None:
            self.seed = int(self.seed)
        if not math.isfinite(self.warmup) or self.warmup < 0:
            raise ConfigError("warmup must be a non-negative number of seconds")
        for sec, fields in self.overrides.items():
            if sec not in _SECTIONS:
                raise ConfigError(f"unknown override section {sec!r}; choose from {sorted(_SECTIONS)}")
            known = {f.name for f in dataclasses.fields(_SECTIONS[sec])}
            bad = set(fields) - known
            if bad:
                raise ConfigError(f"unknown {sec} field(s): {', '.join(sorted(bad))}")

    def check_files(self) -> None:
        if self.scenario not in STOCK and not Path(self.scenario).exists():
            raise ConfigError(
                f"scenario {self.scenario!r} is neither a stock scenario ({', '.join(STOCK)}) nor an existing file"
            )

    def pipeline_config(self) -> PipelineConfig:
        ov = self.overrides
        try:
            ekf = EkfConfig(**{**ov.get("ekf", {}), "mode": self.mode})
            ref = RefAngleConfig(**{**ov.get("ref", {}), "enabled": self.ref_angles})
            acor = AcorConfig(**{**ov.get("acor_cfg", {}), "enabled": self.acor})
            ukf = UkfConfig(**ov.get("ukf", {}))
            vel = VirtualVelocityConfig(**ov.get("velocity", {}))
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        return PipelineConfig(ekf=ekf, ref=ref, provider=self.provider, velocity=vel, ukf=ukf, acor=acor)

    def label(self) -> str:
        parts = [Path(self.scenario).stem, self.mode.name.lower(), self.provider.value]
        if not self.acor:
            parts.append("noacor")
        if not self.ref_angles:
            parts.append("noref")
        if self.seed is not None:
            parts.append(f"s{self.seed}")
        for sec, fields in sorted(self.overrides.items()):
            parts += [f"{k}={v}" for k, v in sorted(fields.items())]
        return "_".join(parts)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mode"] = self.mode.name.lower()
        d["provider"] = self.provider.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        known = {f.name for f in dataclasses.fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(bad))}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e


def load_yaml(path: str | Path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    try:
        with open(p) as f:
            d = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {p} is not valid YAML: {e}") from e
    if not isinstance(d, dict):
        raise ConfigError(f"config file {p} must hold a mapping at top level")
    return d


def merge(file_cfg: dict, flags: dict) -> dict:
    """Config file values, replaced by any flag actually given on the command line."""
    out = dict(file_cfg)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def expand_matrix(base: dict, matrix: dict) -> list[RunConfig]:
    """Cartesian product of list-valued keys over a base config.

    Keys of the form ``section.field`` (e.g. ``ekf.q_yaw``) expand into
    overrides.
    """
    import itertools

    keys = list(matrix)
    for k in keys:
        if not isinstance(matrix[k], list) or not matrix[k]:
            raise ConfigError(f"matrix entry {k!r} must be a non-empty list")
    runs = []
    for combo in itertools.product(*(matrix[k] for k in keys)):
        d = dict(base)
        d["overrides"] = {s: dict(f) for s, f in base.get("overrides", {}).items()}
        for k, v in zip(keys, combo):
            if "." in k:
                sec, name = k.split(".", 1)
                d["overrides"].setdefault(sec, {})[name] = v
            else:
                d[k] = v
        runs.append(RunConfig.from_dict(d))
    return runs
