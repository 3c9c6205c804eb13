"""Slot-level simulator for multipath transport over UAV relays and a LEO satellite,
with learned and heuristic path schedulers and handover-aware congestion control."""

from .config import SimConfig, load
from .harness import ExperimentSpec, run_episode, run_experiment, scaled_config, train
from .metrics import EpisodeMetrics, ofo_degree

__version__ = "0.1.0"

__all__ = [
    "EpisodeMetrics", "ExperimentSpec", "SimConfig", "load", "ofo_degree", "run_episode",
    "run_experiment", "scaled_config", "train",
]
