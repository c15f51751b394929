"""3D root-system skeleton reconstruction from calibrated multi-view views.

The package turns per-view lateral-root detections plus cross-view
keypoint matches into a 3D skeleton: matched boxes are triangulated in
sliding view triplets, fused by reprojection error, refined by a
fixed-iteration Levenberg-Marquardt bundle adjustment with an
inter-root angle penalty, and connected into a main root by a top-down
raster growth simulation. A procedural synthetic generator provides
ground truth for every stage.
"""

from .geometry import CameraView, Intrinsics, Pose  # noqa: F401

__version__ = "0.1.0"
