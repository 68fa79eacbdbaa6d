"""Direct monocular visual odometry with pluggable pose priors.

Photometric keyframe tracking over image pyramids, a pose-prior interface
(identity / constant-motion / noisy-oracle / external process), snippet
loss kernels for scale-consistent depth+pose training signals, a synthetic
plane-world sequence generator, and trajectory evaluation tools.
"""

__version__ = "0.1.0"

from .geometry import CameraModel, Pose, Twist, compose, inverse, se3_exp, se3_log
from .imaging import GrayImage, Pyramid, build_pyramid, load_image, save_pgm
from .losses import DepthMap, LossWeights, SnippetSample, total_loss
from .priors import PriorResponse, PriorSource, get_prior
from .tracker import TrackerConfig, TrackingLost, VisualOdometry

__all__ = [
    "__version__",
    "CameraModel",
    "Pose",
    "Twist",
    "compose",
    "inverse",
    "se3_exp",
    "se3_log",
    "GrayImage",
    "Pyramid",
    "build_pyramid",
    "load_image",
    "save_pgm",
    "DepthMap",
    "LossWeights",
    "SnippetSample",
    "total_loss",
    "PriorResponse",
    "PriorSource",
    "get_prior",
    "TrackerConfig",
    "TrackingLost",
    "VisualOdometry",
]
