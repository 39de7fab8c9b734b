"""Leak detection and localization for a single water pipeline."""

__version__ = "0.1.0"

from .hydraulics import BoundaryMode, GridModel, LeakSpec, PipelineParams, natural_frequency, steady_state  # noqa: E402
from .simulator import ChirpSignal, TimedLeak, TimeSeries, simulate_pipeline  # noqa: E402

__all__ = [
    "BoundaryMode",
    "ChirpSignal",
    "GridModel",
    "LeakSpec",
    "PipelineParams",
    "TimeSeries",
    "TimedLeak",
    "natural_frequency",
    "simulate_pipeline",
    "steady_state",
]
