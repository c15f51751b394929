"""Procedural root systems with calibrated renders and oracle matches.

The generator builds a ground-truth 3D root system (a main root
descending in world y with straight lateral segments attached at sorted
junctions), renders binary masks and exact per-view detections from a
ring of cameras, and emits keypoint matches by sampling points along
each lateral — with controllable noise, dropout, and outliers standing
in for a learned matcher's failure modes.

Randomness is split into independent streams (geometry, detection
noise, match noise per view pair) so toggling one kind of noise never
shifts another.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .detection import Detection2D
from .errors import ValidationError
from .geometry import CameraView, Intrinsics, look_at_pose, project_many
from .matching import KeypointMatch
from .raster import rasterize_segments

_GEOMETRY_STREAM = 0
_DETECTION_STREAM = 1
_MATCH_STREAM = 2


@dataclass(frozen=True)
class RootSystemSpec:
    """Parameters of a procedural root system.

    Desk-scale defaults (tens of laterals) keep the test suite fast;
    counts in the hundreds work but are slow. Angles are radians from
    the vertical, inside (0, pi/2).
    """

    seed: int = 0
    lateral_count: tuple[int, int] = (30, 60)
    main_length: float = 14.0
    main_segments: int = 24
    main_jitter: float = 0.12
    lateral_length: tuple[float, float] = (1.8, 0.5)  # mean, sigma
    min_lateral_length: float = 0.4
    branching_angle: tuple[float, float] = (math.radians(50.0), math.radians(12.0))
    min_junction_gap: float = 0.18
    junction_span: tuple[float, float] = (0.08, 0.96)  # fraction of main length

    def __post_init__(self):
        if self.lateral_count[0] < 1 or self.lateral_count[0] > self.lateral_count[1]:
            raise ValidationError("bad lateral count range")
        if self.main_length <= 0 or self.lateral_length[0] <= 0:
            raise ValidationError("lengths must be positive")
        if not (0.0 < self.branching_angle[0] < math.pi / 2):
            raise ValidationError("mean branching angle must be in (0, pi/2)")


@dataclass(frozen=True)
class NoiseSpec:
    """Observation corruption levels; all default to a clean scene."""

    keypoint_sigma: float = 0.0
    detection_dropout: float = 0.0
    match_outlier_rate: float = 0.0
    match_dropout: float = 0.0

    def __post_init__(self):
        rates = (self.detection_dropout, self.match_outlier_rate, self.match_dropout)
        if any(not (0.0 <= r <= 1.0) for r in rates):
            raise ValidationError("rates must lie in [0, 1]")
        if self.keypoint_sigma < 0:
            raise ValidationError("keypoint sigma must be >= 0")


@dataclass(frozen=True)
class RigSpec:
    """Camera ring and rendering parameters."""

    camera_count: int = 5
    ring_radius: float = 25.0
    separation_deg: float = 15.0
    image_width: int = 512
    image_height: int = 512
    focal: float = 500.0
    stroke_width: float = 3.0
    box_pad: float = 2.0

    def __post_init__(self):
        if self.camera_count < 3:
            raise ValidationError("triplet triangulation needs at least 3 cameras")


@dataclass
class Lateral:
    start: np.ndarray
    end: np.ndarray
    junction_index: int


@dataclass
class GroundTruth:
    """The 3D root system every pipeline stage is checked against."""

    main_root: np.ndarray  # (S, 3) polyline, y strictly increasing
    laterals: list[Lateral]
    adjacency: set[tuple[int, int]]  # consecutive laterals along the main root

    def lateral_segments(self) -> np.ndarray:
        return np.array([[lat.start, lat.end] for lat in self.laterals])

    def all_segments(self) -> np.ndarray:
        main = np.stack([self.main_root[:-1], self.main_root[1:]], axis=1)
        if self.laterals:
            return np.concatenate([main, self.lateral_segments()])
        return main

    def bounding_diagonal(self) -> float:
        pts = np.concatenate([self.lateral_segments().reshape(-1, 3), self.main_root])
        return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


@dataclass
class RenderedView:
    """One calibrated view: mask, detections, and their root identities."""

    view: CameraView
    mask: np.ndarray
    detections: list[Detection2D]
    root_ids: list[int]


@dataclass
class SceneBundle:
    """Everything one reconstruction run consumes, plus its ground truth."""

    spec: RootSystemSpec
    noise: NoiseSpec
    rig: RigSpec
    ground_truth: GroundTruth
    rendered: list[RenderedView]
    matches: dict[tuple[int, int], list[KeypointMatch]]

    @property
    def views(self) -> list[CameraView]:
        return [r.view for r in self.rendered]


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def generate(spec: RootSystemSpec) -> GroundTruth:
    """Sample a ground-truth root system, deterministic per seed."""
    rng = _stream(spec.seed, _GEOMETRY_STREAM)
    count = int(rng.integers(spec.lateral_count[0], spec.lateral_count[1] + 1))

    # main root: straight descent with a smooth random walk in x/z
    ys = np.linspace(0.0, spec.main_length, spec.main_segments + 1)
    steps = rng.normal(scale=spec.main_jitter / math.sqrt(spec.main_segments), size=(spec.main_segments, 2))
    offsets = np.vstack([np.zeros(2), np.cumsum(steps, axis=0)])
    main = np.column_stack([offsets[:, 0], ys, offsets[:, 1]])

    # junction depths: sorted uniforms with a guaranteed minimum gap
    lo = spec.junction_span[0] * spec.main_length
    hi = spec.junction_span[1] * spec.main_length
    gap = spec.min_junction_gap
    slack = (hi - lo) - (count - 1) * gap
    if slack <= 0:
        raise ValidationError(
            f"{count} junctions with gap {gap} do not fit in [{lo:.2f}, {hi:.2f}]"
        )
    base = np.sort(rng.uniform(0.0, slack, size=count))
    junction_y = lo + base + gap * np.arange(count)

    laterals = []
    for i, y in enumerate(junction_y):
        junction = _interp_polyline(main, y)
        theta = float(
            np.clip(
                rng.normal(spec.branching_angle[0], spec.branching_angle[1]),
                0.05,
                math.pi / 2 - 0.05,
            )
        )
        phi = float(rng.uniform(0.0, 2.0 * math.pi))
        direction = np.array(
            [math.sin(theta) * math.cos(phi), math.cos(theta), math.sin(theta) * math.sin(phi)]
        )
        length = max(
            float(rng.normal(spec.lateral_length[0], spec.lateral_length[1])),
            spec.min_lateral_length,
        )
        laterals.append(Lateral(start=junction, end=junction + direction * length, junction_index=i))

    adjacency = {(i, i + 1) for i in range(count - 1)}
    return GroundTruth(main_root=main, laterals=laterals, adjacency=adjacency)


def _interp_polyline(polyline: np.ndarray, y: float) -> np.ndarray:
    """Point on a y-monotone polyline at the given y."""
    ys = polyline[:, 1]
    i = int(np.searchsorted(ys, y, side="right") - 1)
    i = min(max(i, 0), len(polyline) - 2)
    t = (y - ys[i]) / (ys[i + 1] - ys[i])
    return polyline[i] + t * (polyline[i + 1] - polyline[i])


def ring_cameras(gt: GroundTruth, rig: RigSpec) -> list[CameraView]:
    """Cameras on a horizontal ring, all aimed at the root centroid."""
    pts = np.concatenate([gt.lateral_segments().reshape(-1, 3), gt.main_root])
    centroid = pts.mean(axis=0)
    views = []
    for k in range(rig.camera_count):
        alpha = math.radians(rig.separation_deg) * (k - (rig.camera_count - 1) / 2)
        center = centroid + rig.ring_radius * np.array([math.sin(alpha), 0.0, -math.cos(alpha)])
        pose = look_at_pose(center, centroid)
        intr = Intrinsics(rig.focal, rig.focal, rig.image_width / 2, rig.image_height / 2)
        views.append(CameraView(intr, pose, rig.image_width, rig.image_height))
    return views


def render_views(gt: GroundTruth, rig: RigSpec | None = None) -> list[RenderedView]:
    """Render masks and exact detections for every ring camera."""
    rig = rig or RigSpec()
    rendered = []
    for view in ring_cameras(gt, rig):
        segs = gt.all_segments()
        flat, in_front = project_many(view, segs.reshape(-1, 3))
        px_segs = flat.reshape(-1, 2, 2)
        drawable = in_front.reshape(-1, 2).all(axis=1)
        mask = rasterize_segments(px_segs[drawable], rig.image_width, rig.image_height, rig.stroke_width)

        detections, root_ids = [], []
        kp_flat, kp_front = project_many(
            view, gt.lateral_segments().reshape(-1, 3)
        )
        kps = kp_flat.reshape(-1, 2, 2)
        front = kp_front.reshape(-1, 2)
        for i in range(len(gt.laterals)):
            if not front[i].all():
                continue
            detections.append(_detection_from_keypoints(kps[i], view, rig.box_pad))
            root_ids.append(i)
        rendered.append(RenderedView(view=view, mask=mask, detections=detections, root_ids=root_ids))
    return rendered


def _detection_from_keypoints(kps: np.ndarray, view: CameraView, pad: float) -> Detection2D:
    lo = kps.min(axis=0) - pad
    hi = kps.max(axis=0) + pad
    vis = np.array([1.0 if view.contains(k) else 0.0 for k in kps])
    return Detection2D(
        center=(lo + hi) / 2.0,
        size=hi - lo,
        score=1.0,
        keypoints=kps.copy(),
        visibility=vis,
    )


def apply_detection_noise(
    rendered: list[RenderedView], noise: NoiseSpec, seed: int
) -> list[RenderedView]:
    """Jitter keypoints and drop detections; boxes follow the keypoints."""
    if noise.keypoint_sigma == 0.0 and noise.detection_dropout == 0.0:
        return rendered
    out = []
    for vi, rv in enumerate(rendered):
        rng = _stream(seed, _DETECTION_STREAM, vi)
        detections, root_ids = [], []
        for det, rid in zip(rv.detections, rv.root_ids):
            if noise.detection_dropout > 0 and rng.random() < noise.detection_dropout:
                continue
            kps = det.keypoints + rng.normal(scale=noise.keypoint_sigma, size=det.keypoints.shape)
            detections.append(_detection_from_keypoints(kps, rv.view, 2.0))
            root_ids.append(rid)
        out.append(replace(rv, detections=detections, root_ids=root_ids))
    return out


def oracle_matches(
    gt: GroundTruth,
    view_a: CameraView,
    view_b: CameraView,
    pair: tuple[int, int],
    noise: NoiseSpec,
    seed: int,
    samples_per_root: int = 8,
) -> list[KeypointMatch]:
    """Emit point matches by sampling along each lateral.

    Every surviving match pairs the projections of one shared 3D point;
    outliers replace both pixels with uniform draws over each image.
    Deterministic per (seed, view pair).
    """
    rng = _stream(seed, _MATCH_STREAM, pair[0], pair[1])
    fractions = np.linspace(0.0, 1.0, samples_per_root)
    matches = []
    for lat in gt.laterals:
        points = lat.start[None, :] + fractions[:, None] * (lat.end - lat.start)[None, :]
        px_a, front_a = project_many(view_a, points)
        px_b, front_b = project_many(view_b, points)
        for k in range(len(points)):
            if not (front_a[k] and front_b[k]):
                continue
            if not (view_a.contains(px_a[k]) and view_b.contains(px_b[k])):
                continue
            if noise.match_dropout > 0 and rng.random() < noise.match_dropout:
                continue
            if noise.match_outlier_rate > 0 and rng.random() < noise.match_outlier_rate:
                p1 = np.array(
                    [rng.uniform(0, view_a.width - 1), rng.uniform(0, view_a.height - 1)]
                )
                p2 = np.array(
                    [rng.uniform(0, view_b.width - 1), rng.uniform(0, view_b.height - 1)]
                )
            else:
                p1 = px_a[k] + rng.normal(scale=noise.keypoint_sigma, size=2)
                p2 = px_b[k] + rng.normal(scale=noise.keypoint_sigma, size=2)
            matches.append(KeypointMatch(p1=p1, p2=p2))
    return matches


def build_scene(
    spec: RootSystemSpec,
    noise: NoiseSpec | None = None,
    rig: RigSpec | None = None,
    samples_per_root: int = 8,
) -> SceneBundle:
    """Generate, render, corrupt, and match one scene end to end."""
    noise = noise or NoiseSpec()
    rig = rig or RigSpec()
    gt = generate(spec)
    rendered = apply_detection_noise(render_views(gt, rig), noise, spec.seed)
    matches = {}
    for a in range(rig.camera_count - 1):
        pair = (a, a + 1)
        matches[pair] = oracle_matches(
            gt, rendered[a].view, rendered[a + 1].view, pair, noise, spec.seed, samples_per_root
        )
    return SceneBundle(
        spec=spec, noise=noise, rig=rig, ground_truth=gt, rendered=rendered, matches=matches
    )
