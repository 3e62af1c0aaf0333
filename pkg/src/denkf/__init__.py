"""Differentiable ensemble Kalman filtering for soft-arm proprioception."""

__version__ = "0.1.0"

from .filter import FilterConfig, kalman_update, run_sequence  # noqa: E402
from .models import build_models, load_models, save_models  # noqa: E402
from .types import Ensemble, PlacementSet, RobotState, SamplingFrequency  # noqa: E402

__all__ = [
    "Ensemble",
    "FilterConfig",
    "PlacementSet",
    "RobotState",
    "SamplingFrequency",
    "build_models",
    "kalman_update",
    "load_models",
    "run_sequence",
    "save_models",
]
