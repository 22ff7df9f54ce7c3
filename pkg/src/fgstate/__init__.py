"""Sliding-window factor-graph vehicle state estimation with an EKF baseline,
a synthetic scenario simulator and an evaluation command line."""

from fgstate.se3 import Pose3, Rot3
from fgstate.state import ImuBias, NavState
from fgstate.estimator import EstimatorConfig, SlidingWindowEstimator

__all__ = ["Pose3", "Rot3", "ImuBias", "NavState", "EstimatorConfig", "SlidingWindowEstimator"]
__version__ = "0.1.0"
