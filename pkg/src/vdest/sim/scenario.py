"""Scenario files: track, speed profile, vehicle, noise and seed."""

from __future__ import annotations

import copy
import functools
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from ..virtual_velocity import VehicleParams
from .synth import NoiseConfig, SensorStreams, synthesize_sensors
from .track import TrackModel, build_track
from .vehicle import GroundTruth, SpeedLimits, knot_profile, simulate_lap, speed_profile

STOCK = ("lvms_like", "monza_like")


@dataclass
class Scenario:
    name: str
    duration: float
    track_cfg: dict
    speed_cfg: dict
    vehicle: VehicleParams
    noise_cfg: dict = field(default_factory=dict)
    seed: int = 0
    dt: float = 1e-3
    brake_bias: float = 0.6

    def noise(self, seed: int | None = None, **overrides) -> NoiseConfig:
        d = copy.deepcopy(self.noise_cfg)
        d.update(overrides)
        d["seed"] = self.seed if seed is None else seed
        return NoiseConfig.from_dict(d)

    def track(self) -> TrackModel:
        return _build_track(_freeze(self.track_cfg))

    def truth(self) -> GroundTruth:
        return _build_truth(self)

    def streams(self, seed: int | None = None, noise: NoiseConfig | None = None, **overrides) -> SensorStreams:
        return synthesize_sensors(self.truth(), noise or self.noise(seed, **overrides))

    def key(self) -> str:
        return json.dumps(
            [self.name, self.duration, self.track_cfg, self.speed_cfg, repr(self.vehicle), self.dt, self.brake_bias],
            sort_keys=True,
        )


def _freeze(d: dict) -> str:
    return json.dumps(d, sort_keys=True)


@functools.lru_cache(maxsize=8)
def _build_track(frozen: str) -> TrackModel:
    return build_track(json.loads(frozen))


_TRUTH_CACHE: dict[str, GroundTruth] = {}


def _build_truth(sc: Scenario) -> GroundTruth:
    k = sc.key()
    if k not in _TRUTH_CACHE:
        track = sc.track()
        if "knots" in sc.speed_cfg:
            prof = knot_profile(track, sc.speed_cfg["knots"])
        else:
            prof = speed_profile(track, SpeedLimits(**sc.speed_cfg))
        _TRUTH_CACHE[k] = simulate_lap(track, prof, sc.vehicle, sc.dt, sc.duration, brake_bias=sc.brake_bias)
    return _TRUTH_CACHE[k]


def data_path(name: str) -> Path:
    return Path(str(resources.files("vdest") / "data" / name))


def load_scenario(path_or_name: str | Path) -> Scenario:
    """Load a scenario file, or a stock scenario by name."""
    p = Path(path_or_name)
    if not p.suffix and str(path_or_name) in STOCK:
        p = data_path(f"{path_or_name}.yaml")
    if not p.exists():
        raise FileNotFoundError(f"scenario file {p} not found")
    with open(p) as f:
        d = yaml.safe_load(f)
    veh = d.get("vehicle", {})
    if isinstance(veh, str):
        vp = p.parent / veh
        if not vp.exists():
            vp = data_path(veh)
        vehicle = VehicleParams.from_yaml(vp)
    else:
        vehicle = VehicleParams.from_dict(veh)
    track_cfg = dict(d["track"])
    track_cfg.setdefault("name", d.get("name", p.stem))
    return Scenario(
        name=d.get("name", p.stem),
        duration=float(d["duration"]),
        track_cfg=track_cfg,
        speed_cfg=d.get("speed", {}),
        vehicle=vehicle,
        noise_cfg=d.get("noise", {}) or {},
        seed=int(d.get("seed", 0)),
        dt=float(d.get("dt", 1e-3)),
        brake_bias=float(d.get("brake_bias", 0.6)),
    )
