"""Gaze decomposition: subject-independent gaze estimation plus a per-subject bias.

Modules
-------
geometry      angle/vector conversions, angular error, NISLGaze wall layout
linmodel      linear-Gaussian image model and population-optimal estimators
training      empirical estimators with and without gaze decomposition
calibration   MAP bias calibration, SGTC/MGTC sampling, error bounds
dilated       dilated (atrous) convolution with no padding
simulate      Monte-Carlo experiment harness and theorem checks
"""
from .geometry import GazeAngles, angles_to_vector, angular_error, vector_to_angles
from .linmodel import LinearEstimator, LinearModel, generate_dataset
from .training import TrainConfig, fit_dec, fit_nodec

__all__ = [
    "GazeAngles", "angles_to_vector", "angular_error", "vector_to_angles",
    "LinearEstimator", "LinearModel", "generate_dataset",
    "TrainConfig", "fit_dec", "fit_nodec",
]
__version__ = "0.1.0"
