"""Relative state estimation between two IMUs with an EKF and observability tools."""

from dualimu.errors import ConfigError, InconsistentScenario, NumericalFailure, RunFailed
from dualimu.state import NoiseParams, SystemState

__all__ = [
    "ConfigError",
    "InconsistentScenario",
    "NoiseParams",
    "NumericalFailure",
    "RunFailed",
    "SystemState",
]

__version__ = "0.1.0"
