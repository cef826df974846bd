"""Track geometry, ground truth and synthetic sensor streams."""

from .scenario import STOCK, Scenario, load_scenario
from .synth import GNSS_DT, IMU_DT, NoiseConfig, SensorStreams, synthesize_sensors
from .track import InvalidGeometry, TrackModel, build_oval, build_track
from .vehicle import GroundTruth, InfeasibleProfile, SpeedLimits, simulate_lap, speed_profile, stationary_truth

__all__ = [
    "GNSS_DT", "IMU_DT", "STOCK", "GroundTruth", "InfeasibleProfile", "InvalidGeometry", "NoiseConfig",
    "Scenario", "SensorStreams", "SpeedLimits", "TrackModel", "build_oval", "build_track", "load_scenario",
    "simulate_lap", "speed_profile", "stationary_truth", "synthesize_sensors",
]
