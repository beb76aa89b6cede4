"""Decentralised traffic incident detection via graph-coupled one-class SVMs."""

__version__ = "0.1.0"

from .data import GeneratorConfig, IncidentRecord, TrafficSeries
from .engine import ProblemGraph, SolverConfig, admm_solve, regularization_path
from .graph import FusedGraph, RegionProfile
from .harness import ExperimentConfig
from .metrics import MetricsReport
from .ocsvm import LossConfig, ModelParams, fit_standalone, solve_local

__all__ = [
    "ExperimentConfig",
    "FusedGraph",
    "GeneratorConfig",
    "IncidentRecord",
    "LossConfig",
    "MetricsReport",
    "ModelParams",
    "ProblemGraph",
    "RegionProfile",
    "SolverConfig",
    "TrafficSeries",
    "admm_solve",
    "fit_standalone",
    "regularization_path",
    "solve_local",
]
