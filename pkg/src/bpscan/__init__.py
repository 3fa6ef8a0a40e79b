"""Probabilistic scan matching with belief-propagation data association."""

from .geometry import Pose, compose, inverse, relative_pose
from .inference import InferenceConfig, MatchResult, PosePrior, match_scans
from .measurement import AssociabilityModel, ClutterModel, ErrorModel, ScanModel
from .pointcloud import SourceCloud, SurfaceCloud, estimate_normals

__version__ = "0.1.0"

__all__ = [
    "AssociabilityModel",
    "ClutterModel",
    "ErrorModel",
    "InferenceConfig",
    "MatchResult",
    "Pose",
    "PosePrior",
    "ScanModel",
    "SourceCloud",
    "SurfaceCloud",
    "compose",
    "estimate_normals",
    "inverse",
    "match_scans",
    "relative_pose",
]
