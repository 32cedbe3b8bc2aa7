"""Learned inverse perception contracts.

Ellipsoid calculus, a small hand-rolled network that maps perception
measurements to uncertainty ellipsoids, the hinge + volume training
objective with its error bound, a synthetic lag-dominated perception
channel on a quadcopter simulator, and the safe-landing state machine that
consumes the contracts.
"""

__version__ = "0.1.0"

from .contract import PacInputs, Sample, TrainConfig, evaluate_error, pac_bound, query, train
from .geometry import Box3, Ellipsoid
from .landing import ApproachConfig, LandingConfig, run_landing, trivial_ipc
from .simulation import CameraRig, SimConfig, SimWorld, generate_dataset

__all__ = [
    "__version__",
    "ApproachConfig",
    "Box3",
    "CameraRig",
    "Ellipsoid",
    "LandingConfig",
    "PacInputs",
    "Sample",
    "SimConfig",
    "SimWorld",
    "TrainConfig",
    "evaluate_error",
    "generate_dataset",
    "pac_bound",
    "query",
    "run_landing",
    "train",
    "trivial_ipc",
]
