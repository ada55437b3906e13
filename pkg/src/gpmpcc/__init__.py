"""Learning-based model predictive contouring control for miniature race cars.

A nominal bicycle model is corrected online by a Gaussian-process residual
(exact or sparse FITC); propagated uncertainty tightens the track constraint
and an SQP solver with an active-set QP runs the controller in closed loop.
"""

from .config import ConfigError, load_experiment_config
from .gp import GPDataset, GPModel, SEHyper
from .mpcc import MPCCConfig, build_ocp
from .simloop import LapLog, compute_metrics, run_experiment, run_lap
from .solver import SQPSolver
from .sparse import SparseGPModel
from .track import Track, load_track
from .vehicle import NoiseSpec, VehicleParams

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "GPDataset", "GPModel", "LapLog", "MPCCConfig", "NoiseSpec",
    "SEHyper", "SQPSolver", "SparseGPModel", "Track", "VehicleParams", "build_ocp", "compute_metrics",
    "load_experiment_config", "load_track", "run_experiment", "run_lap",
]
