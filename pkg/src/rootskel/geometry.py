"""Pinhole cameras, projection, two-view triangulation, reprojection error.

Conventions used throughout the package:

* World frame: right-handed, y increases downward (roots grow toward +y).
* Camera frame: x right, y down, z forward along the optical axis.
* Image frame: origin at the top-left corner, u right, v down, in pixels.
  A pixel may lie outside the image bounds; callers flag that themselves.

Poses store the world-to-camera rotation and translation, so a world
point p maps to camera coordinates as ``R @ p + t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateBaseline,
    DegenerateProjection,
    IllConditioned,
    ValidationError,
)

# Camera-frame depth below which projection is considered degenerate.
MIN_PROJECTION_DEPTH = 1e-12

# Pixel error charged per view for a point behind the camera.
BEHIND_CAMERA_PENALTY = 1e6


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not all(math.isfinite(v) for v in (self.fx, self.fy, self.cx, self.cy)):
            raise ValidationError("intrinsics must be finite")


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform.

    rotation is a 3x3 orthonormal matrix with determinant +1 (checked to
    1e-9); translation is a 3-vector in camera units.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if r.shape != (3, 3):
            raise ValidationError(f"rotation must be 3x3, got {r.shape}")
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise ValidationError("pose entries must be finite")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise ValidationError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValidationError("rotation determinant must be +1 within 1e-9")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def camera_center(self) -> np.ndarray:
        """Camera center in world coordinates (-R^T t)."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class CameraView:
    """A calibrated camera bound to an image frame."""

    intrinsics: Intrinsics
    pose: Pose
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValidationError("image dimensions must be >= 1")

    def contains(self, pixel: np.ndarray) -> bool:
        u, v = float(pixel[0]), float(pixel[1])
        return 0.0 <= u <= self.width - 1 and 0.0 <= v <= self.height - 1


def project(view: CameraView, point: np.ndarray) -> np.ndarray:
    """Project a world point into a view, returning a (u, v) pixel.

    Raises DegenerateProjection when the point is not strictly in front
    of the camera (camera-frame z <= 1e-12).
    """
    p = np.asarray(point, dtype=float).reshape(3)
    pc = view.pose.rotation @ p + view.pose.translation
    if pc[2] <= MIN_PROJECTION_DEPTH:
        raise DegenerateProjection(f"camera-frame depth {pc[2]:.3e} <= {MIN_PROJECTION_DEPTH}")
    k = view.intrinsics
    return np.array([k.fx * pc[0] / pc[2] + k.cx, k.fy * pc[1] / pc[2] + k.cy])


def project_many(view: CameraView, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of an (N, 3) array.

    Returns (pixels (N, 2), in_front (N,) bool). Behind-camera rows hold
    NaN pixels and in_front False instead of raising.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    pc = pts @ view.pose.rotation.T + view.pose.translation
    in_front = pc[:, 2] > MIN_PROJECTION_DEPTH
    k = view.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * pc[:, 0] / pc[:, 2] + k.cx
        v = k.fy * pc[:, 1] / pc[:, 2] + k.cy
    pix = np.stack([u, v], axis=1)
    pix[~in_front] = np.nan
    return pix, in_front


def projection_matrix(view: CameraView) -> np.ndarray:
    """3x4 matrix K [R | t] mapping homogeneous world points to pixels."""
    k = view.intrinsics
    kmat = np.array([[k.fx, 0.0, k.cx], [0.0, k.fy, k.cy], [0.0, 0.0, 1.0]])
    rt = np.hstack([view.pose.rotation, view.pose.translation.reshape(3, 1)])
    return kmat @ rt


def triangulate_pair(
    view_a: CameraView,
    view_b: CameraView,
    px_a: np.ndarray,
    px_b: np.ndarray,
) -> np.ndarray:
    """Linear two-view triangulation (DLT) from pixel observations.

    Stacks the cross-product constraints of both projections into a 4x4
    system and takes the SVD null vector. Deterministic; no iterative
    refinement.

    Raises DegenerateBaseline for coincident camera centers and
    IllConditioned when the two smallest singular values are relatively
    closer than 1e-12 (no unique null direction) or the solution lands
    at infinity.
    """
    pa = np.asarray(px_a, dtype=float).reshape(2)
    pb = np.asarray(px_b, dtype=float).reshape(2)
    if not (np.all(np.isfinite(pa)) and np.all(np.isfinite(pb))):
        raise ValidationError("pixels must be finite")
    baseline = np.linalg.norm(view_a.pose.camera_center - view_b.pose.camera_center)
    if baseline < 1e-9:
        raise DegenerateBaseline(f"camera centers within {baseline:.3e}")

    rows = []
    for view, (u, v) in ((view_a, pa), (view_b, pb)):
        m = projection_matrix(view)
        rows.append(u * m[2] - m[0])
        rows.append(v * m[2] - m[1])
    a = np.array(rows)
    # Row normalization only improves conditioning; the null space is unchanged.
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    a = a / norms

    _, s, vt = np.linalg.svd(a)
    if s[-2] <= 0.0 or (s[-2] - s[-1]) < 1e-12 * s[-2]:
        raise IllConditioned(f"singular values too close: {s[-2]:.3e} vs {s[-1]:.3e}")
    x = vt[-1]
    if abs(x[3]) < 1e-15:
        raise IllConditioned("triangulated point at infinity")
    return x[:3] / x[3]


def reprojection_error(
    views: list[CameraView],
    point: np.ndarray,
    observations: list[np.ndarray],
    behind_penalty: float = BEHIND_CAMERA_PENALTY,
) -> float:
    """Sum over views of the pixel distance between projection and observation.

    A view where the point falls behind the camera contributes
    ``behind_penalty`` pixels instead of raising, so optimizers see a
    finite, monotone-discouraging value.
    """
    if len(views) != len(observations) or len(views) < 1:
        raise ValidationError("views and observations must have equal length >= 1")
    total = 0.0
    p = np.asarray(point, dtype=float).reshape(3)
    for view, obs in zip(views, observations):
        try:
            proj = project(view, p)
        except DegenerateProjection:
            total += behind_penalty
            continue
        total += float(np.linalg.norm(proj - np.asarray(obs, dtype=float).reshape(2)))
    return total


def rotation_from_axis_angle(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula; safe near zero via the Taylor limits."""
    w = np.asarray(w, dtype=float).reshape(3)
    theta = np.linalg.norm(w)
    k = skew(w)
    if theta < 1e-12:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * (k @ k)


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(v) @ x == cross(v, x)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def look_at_pose(center: np.ndarray, target: np.ndarray, down: np.ndarray | None = None) -> Pose:
    """Pose of a camera at ``center`` whose optical axis points at ``target``.

    ``down`` picks the world direction the image v axis should follow
    (default world +y, keeping top-down scenes upright in the image).
    """
    center = np.asarray(center, dtype=float).reshape(3)
    target = np.asarray(target, dtype=float).reshape(3)
    forward = target - center
    n = np.linalg.norm(forward)
    if n < 1e-12:
        raise ValidationError("camera center coincides with the look-at target")
    forward = forward / n
    d = np.array([0.0, 1.0, 0.0]) if down is None else np.asarray(down, dtype=float).reshape(3)
    d = d - (d @ forward) * forward
    dn = np.linalg.norm(d)
    if dn < 1e-9:
        raise ValidationError("down direction parallel to the optical axis")
    d = d / dn
    right = np.cross(d, forward)
    rotation = np.vstack([right, d, forward])
    return Pose(rotation=rotation, translation=-rotation @ center)
