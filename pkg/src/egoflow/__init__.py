"""Egomotion and object motion from optic flow with a sparse motion-field network."""

from .geometry import CameraModel, EgoMotion, Pose
from .egosolver import DegenerateInputError, SolveReport, recover_rotation, recover_translation, robust_egomotion
from .mfg import MfgConfig, MfgModel

__version__ = "0.1.0"

__all__ = [
    "CameraModel", "EgoMotion", "Pose", "DegenerateInputError", "SolveReport",
    "recover_rotation", "recover_translation", "robust_egomotion", "MfgConfig", "MfgModel",
]
