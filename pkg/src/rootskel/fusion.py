"""Triplet triangulation of matched roots and error-weighted fusion.

A track anchors a root at the middle view of a (left, middle, right)
view triplet, with optional partners found by box pairing in the
adjacent views. Each endpoint is triangulated once per available view
pair, every candidate is scored by its summed reprojection distance
over the views where the root was observed, and the candidates are
fused with weights that favor the smaller error. Roots seen in only
one pair are validated against the remaining view's foreground.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .detection import Detection2D
from .errors import (
    DegenerateBaseline,
    DegenerateProjection,
    IllConditioned,
    InsufficientViews,
    ValidationError,
)
from .geometry import CameraView, project, reprojection_error, triangulate_pair

FUSION_EPSILON = 1e-6
MIN_ROOT_LENGTH = 1e-6


@dataclass
class RootTrack:
    """Per-view detections of one root across a view triplet.

    ``detections`` maps view index -> Detection2D; the middle view is
    always present. ``box_indices`` keeps the per-view detection list
    positions for provenance.
    """

    track_id: int
    middle_view: int
    detections: dict[int, Detection2D]
    box_indices: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.middle_view not in self.detections:
            raise ValidationError("track must include its middle view")

    @property
    def views(self) -> list[int]:
        return sorted(self.detections)


@dataclass
class EndpointCandidate:
    """One triangulated endpoint with its reprojection error."""

    point: np.ndarray
    error: float
    pair: tuple[int, int]
    score_views: int = 1

    @property
    def mean_error(self) -> float:
        return self.error / max(self.score_views, 1)


@dataclass
class LateralRoot3D:
    """A fused 3D root segment with provenance."""

    root_id: int
    start: np.ndarray
    end: np.ndarray
    reproj_error_total: float
    views_used: list[int]
    fused_from: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float).reshape(3)
        self.end = np.asarray(self.end, dtype=float).reshape(3)
        if np.linalg.norm(self.end - self.start) <= MIN_ROOT_LENGTH:
            raise ValidationError(f"degenerate root segment (id {self.root_id})")


@dataclass
class PruneDecision:
    keep: bool
    reason: str | None = None
    distances: tuple[float, float] | None = None


def triangulate_track(
    track: RootTrack,
    views: list[CameraView],
    asymmetric_errors_as_printed: bool = False,
) -> dict[str, list[EndpointCandidate]]:
    """Triangulate the start and end keypoints of a track.

    Produces up to two candidates per endpoint: one from the
    (left, middle) pair and one from (middle, right). Candidate error
    is the summed reprojection distance over all views where the track
    was observed; ``asymmetric_errors_as_printed`` instead scores the
    right-pair candidate on the right view alone.

    Raises InsufficientViews when fewer than two observations exist.
    """
    present = track.views
    if len(present) < 2:
        raise InsufficientViews(f"track {track.track_id} observed in {len(present)} view(s)")
    mid = track.middle_view
    pairs = []
    for other in present:
        if other == mid:
            continue
        pairs.append((min(other, mid), max(other, mid)))
    pairs.sort()

    out: dict[str, list[EndpointCandidate]] = {"start": [], "end": []}
    for endpoint_idx, name in ((0, "start"), (1, "end")):
        for a, b in pairs:
            px_a = track.detections[a].keypoints[endpoint_idx]
            px_b = track.detections[b].keypoints[endpoint_idx]
            try:
                point = triangulate_pair(views[a], views[b], px_a, px_b)
            except (DegenerateBaseline, IllConditioned):
                continue
            if asymmetric_errors_as_printed and b > mid:
                score_views = [b]
            else:
                score_views = present
            err = reprojection_error(
                [views[v] for v in score_views],
                point,
                [track.detections[v].keypoints[endpoint_idx] for v in score_views],
            )
            out[name].append(EndpointCandidate(point, err, (a, b), len(score_views)))
    return out


def inverse_error_weights(errors: np.ndarray, epsilon: float = FUSION_EPSILON) -> np.ndarray:
    """Normalized inverse-error weights; smaller error, larger weight."""
    errors = np.asarray(errors, dtype=float)
    if np.any(errors < 0):
        raise ValidationError("errors must be non-negative")
    inv = 1.0 / (epsilon + errors)
    return inv / inv.sum()


def softmin_weights(errors: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Alternative weighting: softmax of negative error."""
    errors = np.asarray(errors, dtype=float)
    z = -(errors - errors.min()) / temperature
    e = np.exp(z)
    return e / e.sum()


def fuse_candidates(
    point_a: np.ndarray,
    error_a: float,
    point_b: np.ndarray,
    error_b: float,
    epsilon: float = FUSION_EPSILON,
    weight_fn=inverse_error_weights,
) -> np.ndarray:
    """Convex combination of two candidates, weighted against error."""
    if weight_fn is inverse_error_weights:
        w = inverse_error_weights(np.array([error_a, error_b]), epsilon)
    else:
        w = weight_fn(np.array([error_a, error_b]))
    return w[0] * np.asarray(point_a, dtype=float) + w[1] * np.asarray(point_b, dtype=float)


def fuse_endpoint(candidates: list[EndpointCandidate], epsilon: float = FUSION_EPSILON) -> np.ndarray:
    if not candidates:
        raise InsufficientViews("no candidates to fuse")
    if len(candidates) == 1:
        return candidates[0].point.copy()
    a, b = candidates[:2]
    return fuse_candidates(a.point, a.error, b.point, b.error, epsilon)


def prune_by_third_view(
    root: LateralRoot3D,
    third: CameraView,
    foreground: np.ndarray,
    dist_threshold: float = 5.0,
) -> PruneDecision:
    """Validate a root against a view that did not vote for it.

    Projects both endpoints into the view and measures the distance
    from the nearest integer pixel of each projection to the nearest
    foreground pixel (0 when it lands on foreground). Discards when a
    projection leaves the image, falls behind the camera, or sits
    farther than the threshold from the foreground.
    """
    fg = np.asarray(foreground, dtype=bool)
    if fg.shape != (third.height, third.width):
        raise ValidationError(
            f"mask shape {fg.shape} does not match view {(third.height, third.width)}"
        )
    if not fg.any():
        return PruneDecision(False, "empty foreground")
    # Distance from every pixel to the nearest foreground pixel.
    dist = ndimage.distance_transform_edt(~fg)

    distances = []
    for point in (root.start, root.end):
        try:
            px = project(third, point)
        except DegenerateProjection:
            return PruneDecision(False, "behind camera")
        c, r = int(round(px[0])), int(round(px[1]))
        if not (0 <= c < third.width and 0 <= r < third.height):
            return PruneDecision(False, "outside image")
        distances.append(float(dist[r, c]))
    if max(distances) > dist_threshold:
        return PruneDecision(False, "off foreground", tuple(distances))
    return PruneDecision(True, None, tuple(distances))


def build_tracks(
    pairs_left: list,
    pairs_right: list,
    detections: dict[int, list[Detection2D]],
    middle: int,
    id_offset: int = 0,
) -> list[RootTrack]:
    """Join adjacent-pair box pairings on the shared middle-view box.

    ``pairs_left`` pairs (middle-1, middle); ``pairs_right`` pairs
    (middle, middle+1). A middle box matched in either pairing yields a
    track; one matched in both yields a three-view track.
    """
    left_by_mid = {p.b: p.a for p in pairs_left}
    right_by_mid = {p.a: p.b for p in pairs_right}
    tracks = []
    for mid_box in sorted(set(left_by_mid) | set(right_by_mid)):
        dets = {middle: detections[middle][mid_box]}
        boxes = {middle: mid_box}
        if mid_box in left_by_mid:
            dets[middle - 1] = detections[middle - 1][left_by_mid[mid_box]]
            boxes[middle - 1] = left_by_mid[mid_box]
        if mid_box in right_by_mid:
            dets[middle + 1] = detections[middle + 1][right_by_mid[mid_box]]
            boxes[middle + 1] = right_by_mid[mid_box]
        tracks.append(
            RootTrack(
                track_id=id_offset + len(tracks),
                middle_view=middle,
                detections=dets,
                box_indices=boxes,
            )
        )
    return tracks
