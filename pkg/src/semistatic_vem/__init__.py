"""Variational-EM factor-graph SLAM for semi-static scenes.

Modules
-------
geom         SE(2) poses and points
consistency  Beta object-consistency model and E-step closed forms
factors      factor residuals, Jacobians and the Levenberg-Marquardt solver
vem          per-frame association, EM loop and object library
sim          deterministic 2D scene and sensor simulator
cli          runner, metrics, ablations and the command-line entry point
"""

from .consistency import BetaState, EStepWeights, MixtureParams
from .geom import Point2, Pose2
from .kernels import BACKEND
from .vem import ObjectModel, Observation, PipelineState, VEMConfig

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "BetaState",
    "EStepWeights",
    "MixtureParams",
    "ObjectModel",
    "Observation",
    "PipelineState",
    "Point2",
    "Pose2",
    "VEMConfig",
]
