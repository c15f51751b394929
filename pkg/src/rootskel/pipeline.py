"""End-to-end orchestration: match -> triangulate -> refine -> connect.

Every stage also exists as a file-level function reading and writing
plain artifacts, so any stage can run in isolation; ``run_pipeline``
chains exactly those functions (round-tripping through the same files),
which makes a staged run and a single run byte-identical.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .bundle_adjustment import (
    AngleConstraint,
    ClassicAdaptive,
    ConstantLambda,
    SbaProblem,
    SbaReport,
    run_sba,
)
from .config import PipelineConfig
from .detection import Detection2D, decode_grids, filter_detections
from .errors import (
    DegenerateProjection,
    InsufficientViews,
    MissingInput,
    ValidationError,
)
from .fusion import (
    LateralRoot3D,
    build_tracks,
    fuse_endpoint,
    prune_by_third_view,
    triangulate_track,
)
from .geometry import CameraView, project, project_many
from .mainroot import (
    SkeletonGraph,
    build_main_root,
    init_label_matrix,
    propagate_rows,
    retain_connections,
)
from .matching import BoxPair, build_score_matrix, greedy_pairing
from .metrics import MatchCriterion, greedy_assignment, pr_3d
from .raster import rasterize_segments
from .synthetic import GroundTruth, oracle_matches

logger = logging.getLogger(__name__)


@dataclass
class Bundle:
    """Everything a reconstruction consumes, loaded from a directory."""

    path: Path
    views: list[CameraView]
    masks: list[np.ndarray]
    detections: list[list[Detection2D]]
    matches: dict[tuple[int, int], list]
    ground_truth: GroundTruth | None = None
    gt_root_ids: list[list[int]] | None = None


@dataclass
class PipelineRoot:
    """A reconstructed root plus its per-view observations."""

    root: LateralRoot3D
    observations: dict[int, tuple[np.ndarray, np.ndarray]]
    boxes: dict[int, int] = field(default_factory=dict)


@dataclass
class PipelineResult:
    skeleton: SkeletonGraph
    report: SbaReport
    metrics: dict
    output_dir: Path


def load_bundle(directory: Path, config: PipelineConfig | None = None) -> Bundle:
    """Load cameras, masks, detections, matches, and optional ground truth.

    Detections come from ``view_k.detections.json`` when present,
    otherwise from raw grids (``view_k.grids.json`` + ``.bin``) decoded
    and NMS-filtered. Missing matches are synthesized from the ground
    truth when ``config.oracle_matches`` is set; otherwise they are an
    error naming the absent file.
    """
    config = config or PipelineConfig()
    directory = Path(directory)
    views = fileio.read_cameras(directory / "cameras.json")

    masks, detections = [], []
    for k in range(len(views)):
        masks.append(fileio.read_mask_pgm(directory / f"view_{k}.mask.pgm"))
        det_path = directory / f"view_{k}.detections.json"
        if det_path.exists():
            detections.append(fileio.read_detections(det_path))
        else:
            grid_path = directory / f"view_{k}.grids.json"
            if not grid_path.exists():
                raise MissingInput(f"view {k}: neither {det_path.name} nor {grid_path.name} found")
            grids = fileio.read_raw_grids(grid_path)
            decoded = decode_grids(
                grids,
                objectness_threshold=config.objectness_threshold,
                y_uses_anchor_height=config.keypoint_y_uses_ah,
            )
            detections.append(
                filter_detections(decoded, config.objectness_threshold, config.iou_threshold)
            )

    ground_truth = None
    gt_root_ids = None
    gt_path = directory / "ground_truth.json"
    if gt_path.exists():
        ground_truth, gt_root_ids = fileio.ground_truth_from_dict(fileio.read_json(gt_path))

    matches = {}
    for a in range(len(views) - 1):
        pair = (a, a + 1)
        match_path = directory / f"matches_{a}_{a + 1}.json"
        if match_path.exists():
            matches[pair] = fileio.read_matches(match_path)
        elif config.oracle_matches and ground_truth is not None:
            from .synthetic import NoiseSpec

            matches[pair] = oracle_matches(
                ground_truth,
                views[a],
                views[a + 1],
                pair,
                NoiseSpec(),
                seed=config.seed,
                samples_per_root=config.samples_per_root,
            )
        else:
            raise MissingInput(
                f"missing {match_path.name}; provide it or pass oracle_matches with ground truth"
            )
    return Bundle(
        path=directory,
        views=views,
        masks=masks,
        detections=detections,
        matches=matches,
        ground_truth=ground_truth,
        gt_root_ids=gt_root_ids,
    )


# ---------------------------------------------------------------------------
# stage: cross-view matching
# ---------------------------------------------------------------------------

def stage_match(bundle: Bundle, config: PipelineConfig) -> dict[tuple[int, int], list[BoxPair]]:
    pairings = {}
    for (a, b), matches in sorted(bundle.matches.items()):
        matrix = build_score_matrix(
            matches,
            bundle.detections[a],
            bundle.detections[b],
            vote_smallest_box_only=config.vote_smallest_box_only,
        )
        pairings[(a, b)] = greedy_pairing(matrix, config.matching_threshold)
    return pairings


# ---------------------------------------------------------------------------
# stage: triplet triangulation, fusion, pruning, merging
# ---------------------------------------------------------------------------

def stage_triangulate(
    bundle: Bundle,
    pairings: dict[tuple[int, int], list[BoxPair]],
    config: PipelineConfig,
) -> list[PipelineRoot]:
    num_views = len(bundle.views)
    tracks = []
    for middle in range(1, num_views - 1):
        tracks.extend(
            build_tracks(
                pairings.get((middle - 1, middle), []),
                pairings.get((middle, middle + 1), []),
                {
                    v: bundle.detections[v]
                    for v in (middle - 1, middle, middle + 1)
                },
                middle,
                id_offset=len(tracks),
            )
        )

    fused = []
    for track in tracks:
        try:
            candidates = triangulate_track(
                track, bundle.views, config.asymmetric_errors_as_printed
            )
        except InsufficientViews:
            continue
        endpoints = {}
        for name in ("start", "end"):
            kept = [
                c
                for c in candidates[name]
                if c.mean_error <= config.max_mean_reproj_error_px
            ]
            if kept:
                endpoints[name] = kept
        if set(endpoints) != {"start", "end"}:
            continue
        try:
            root = LateralRoot3D(
                root_id=track.track_id,
                start=fuse_endpoint(endpoints["start"], config.fusion_epsilon),
                end=fuse_endpoint(endpoints["end"], config.fusion_epsilon),
                reproj_error_total=sum(c.error for cs in endpoints.values() for c in cs),
                views_used=track.views,
                fused_from=[c.pair for c in endpoints["start"]],
            )
        except ValidationError:
            continue

        if len(track.views) == 2:
            triplet = {track.middle_view - 1, track.middle_view, track.middle_view + 1}
            third = (triplet - set(track.views)).pop()
            decision = prune_by_third_view(
                root, bundle.views[third], bundle.masks[third], config.dist_threshold_px
            )
            if not decision.keep:
                continue
        fused.append((track, root))

    return _merge_shared_box_tracks(fused, bundle, config)


def _merge_shared_box_tracks(
    fused: list, bundle: Bundle, config: PipelineConfig
) -> list[PipelineRoot]:
    """Merge tracks that share any (view, box) detection.

    Sliding triplets see the same physical root several times; shared
    detections identify those duplicates, whose fused endpoints are
    averaged.
    """
    parent = list(range(len(fused)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    owner: dict[tuple[int, int], int] = {}
    for idx, (track, _) in enumerate(fused):
        for view, box in track.box_indices.items():
            key = (view, box)
            if key in owner:
                ra, rb = find(owner[key]), find(idx)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
            else:
                owner[key] = idx

    groups: dict[int, list[int]] = {}
    for idx in range(len(fused)):
        groups.setdefault(find(idx), []).append(idx)

    def group_key(members):
        return min(
            (view, box)
            for m in members
            for view, box in fused[m][0].box_indices.items()
        )

    roots = []
    for root_id, members in enumerate(sorted(groups.values(), key=group_key)):
        starts = np.array([fused[m][1].start for m in members])
        ends = np.array([fused[m][1].end for m in members])
        start = starts.mean(axis=0)
        end = ends.mean(axis=0)

        observations: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        boxes: dict[int, int] = {}
        for m in sorted(members):
            track = fused[m][0]
            for view, det in track.detections.items():
                if view not in observations:
                    observations[view] = (det.keypoints[0].copy(), det.keypoints[1].copy())
                    boxes[view] = track.box_indices[view]

        error = 0.0
        for view, (s_px, e_px) in observations.items():
            for point, obs in ((start, s_px), (end, e_px)):
                try:
                    error += float(np.linalg.norm(project(bundle.views[view], point) - obs))
                except DegenerateProjection:
                    error += 1e6
        try:
            root = LateralRoot3D(
                root_id=root_id,
                start=start,
                end=end,
                reproj_error_total=error,
                views_used=sorted(observations),
                fused_from=[fused[m][1].root_id for m in members],
            )
        except ValidationError:
            continue
        roots.append(PipelineRoot(root=root, observations=observations, boxes=boxes))
    return roots


# ---------------------------------------------------------------------------
# stage: bundle adjustment
# ---------------------------------------------------------------------------

def _segment_angle_3d(a: LateralRoot3D, b: LateralRoot3D) -> float | None:
    u = a.end - a.start
    v = b.end - b.start
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < 1e-9 or nv < 1e-9:
        return None
    cos = float(np.clip(u @ v / (nu * nv), -1.0, 1.0))
    theta = math.acos(cos)
    if not (1e-6 < theta < math.pi - 1e-6):
        return None
    return theta


def build_sba_problem(
    views: list[CameraView],
    roots: list[PipelineRoot],
    adjacency: set[tuple[int, int]],
) -> SbaProblem:
    """Points are root endpoints (start, end interleaved); reference
    angles for adjacent roots are their current 3D angles."""
    points = np.empty((2 * len(roots), 3))
    index = {}
    for i, pr in enumerate(roots):
        points[2 * i] = pr.root.start
        points[2 * i + 1] = pr.root.end
        index[pr.root.root_id] = i

    obs_view, obs_point, obs_pixel = [], [], []
    for i, pr in enumerate(roots):
        for view, (s_px, e_px) in sorted(pr.observations.items()):
            obs_view += [view, view]
            obs_point += [2 * i, 2 * i + 1]
            obs_pixel += [s_px, e_px]

    constraints = []
    by_id = {pr.root.root_id: pr.root for pr in roots}
    for a, b in sorted(adjacency):
        if a not in index or b not in index:
            continue
        theta = _segment_angle_3d(by_id[a], by_id[b])
        if theta is None:
            continue
        ia, ib = index[a], index[b]
        constraints.append(
            AngleConstraint(
                seg_a=(2 * ia, 2 * ia + 1), seg_b=(2 * ib, 2 * ib + 1), theta_ref=theta
            )
        )
    return SbaProblem(
        views=views,
        points=points,
        obs_view=np.array(obs_view, dtype=int),
        obs_point=np.array(obs_point, dtype=int),
        obs_pixel=np.array(obs_pixel, dtype=float),
        constraints=constraints,
    )


def stage_sba(
    bundle: Bundle, roots: list[PipelineRoot], config: PipelineConfig
) -> tuple[list[PipelineRoot], SbaReport, list[CameraView]]:
    """Refine poses and endpoints; angle references come from the
    adjacency of the unrefined skeleton."""
    if not roots:
        raise ValidationError("no roots to refine")
    pre_adjacency = connect_adjacency(bundle.views, bundle.masks, roots, config)
    problem = build_sba_problem(bundle.views, roots, pre_adjacency)
    if config.damping_policy == "constant":
        policy = ConstantLambda(config.lambda0)
    else:
        policy = ClassicAdaptive(config.lambda0)
    report = run_sba(problem, config.sba_iterations, policy, config.angle_weight)

    refined = []
    for i, pr in enumerate(roots):
        start = report.points[2 * i]
        end = report.points[2 * i + 1]
        error = 0.0
        for view, (s_px, e_px) in pr.observations.items():
            for point, obs in ((start, s_px), (end, e_px)):
                try:
                    error += float(np.linalg.norm(project(report.views[view], point) - obs))
                except DegenerateProjection:
                    error += 1e6
        try:
            root = LateralRoot3D(
                root_id=pr.root.root_id,
                start=start,
                end=end,
                reproj_error_total=error,
                views_used=pr.root.views_used,
                fused_from=pr.root.fused_from,
            )
        except ValidationError:
            root = pr.root
        refined.append(PipelineRoot(root=root, observations=pr.observations, boxes=pr.boxes))
    return refined, report, report.views


# ---------------------------------------------------------------------------
# stage: main-root connection
# ---------------------------------------------------------------------------

def connect_adjacency(
    views: list[CameraView],
    masks: list[np.ndarray],
    roots: list[PipelineRoot],
    config: PipelineConfig,
) -> set[tuple[int, int]]:
    """Per-view growth simulation pooled into retained adjacencies.

    The propagation foreground is the observed mask united with the
    reprojected reconstructed laterals (guaranteeing every seeded start
    lies on foreground); the observed mask supplies the connectivity of
    the trunk the junction events travel along.
    """
    ledgers = []
    for k, view in enumerate(views):
        segments, starts = [], []
        for pr in roots:
            px, in_front = project_many(view, np.vstack([pr.root.start, pr.root.end]))
            if not in_front.all():
                continue
            segments.append(px)
            s = px[0]
            if 0 <= s[0] <= view.width - 1 and 0 <= s[1] <= view.height - 1:
                starts.append((s, pr.root.root_id))
        fg = masks[k].copy()
        if segments:
            fg |= rasterize_segments(
                np.array(segments), view.width, view.height, config.stroke_width
            )
        matrix = init_label_matrix(fg, starts)
        _, ledger = propagate_rows(matrix, eq10_literal=config.eq10_literal)
        ledgers.append(ledger)
    return retain_connections(ledgers, config.retention_min_count)


def stage_connect(
    views: list[CameraView],
    masks: list[np.ndarray],
    roots: list[PipelineRoot],
    config: PipelineConfig,
) -> SkeletonGraph:
    adjacency = connect_adjacency(views, masks, roots, config)
    return build_main_root([pr.root for pr in roots], adjacency, views[0])


# ---------------------------------------------------------------------------
# stage: evaluation
# ---------------------------------------------------------------------------

def stage_evaluate(
    skeleton: SkeletonGraph, gt: GroundTruth, config: PipelineConfig
) -> dict:
    criterion = MatchCriterion(config.criterion_2d_px, config.criterion_3d_frac)
    gt_segments = [(lat.start, lat.end) for lat in gt.laterals]
    pr = pr_3d(skeleton.laterals, gt_segments, criterion)

    # map reconstructed ids onto ground-truth indices to compare adjacency
    pred_pts = np.array([[r.start, r.end] for r in skeleton.laterals]).reshape(-1, 2, 3)
    gt_pts = np.asarray(gt_segments, dtype=float).reshape(-1, 2, 3)
    diagonal = gt.bounding_diagonal()
    mapping = {}
    for i, j in greedy_assignment(pred_pts, gt_pts):
        d = np.linalg.norm(pred_pts[i] - gt_pts[j], axis=1)
        if np.all(d <= config.criterion_3d_frac * diagonal):
            mapping[skeleton.laterals[i].root_id] = j
    mapped = set()
    unmappable = 0
    for a, b in skeleton.adjacency:
        if a in mapping and b in mapping:
            ga, gb = mapping[a], mapping[b]
            mapped.add((min(ga, gb), max(ga, gb)))
        else:
            unmappable += 1
    gt_adj = {(min(a, b), max(a, b)) for a, b in gt.adjacency}
    return {
        "pr_3d": pr.as_dict(),
        "adjacency_matches_ground_truth": mapped == gt_adj and unmappable == 0,
        "retained_adjacency_count": len(skeleton.adjacency),
        "gt_adjacency_count": len(gt_adj),
        "criterion": {
            "max_px_2d": config.criterion_2d_px,
            "max_diag_frac_3d": config.criterion_3d_frac,
        },
    }


# ---------------------------------------------------------------------------
# file-level stage wrappers + the full run
# ---------------------------------------------------------------------------

def run_match_stage(bundle_dir: Path, out_dir: Path, config: PipelineConfig) -> Path:
    bundle = load_bundle(bundle_dir, config)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairings = stage_match(bundle, config)
    path = out_dir / "pairings.json"
    fileio.write_pairings(path, pairings)
    return path


def run_triangulate_stage(bundle_dir: Path, out_dir: Path, config: PipelineConfig) -> Path:
    bundle = load_bundle(bundle_dir, config)
    out_dir = Path(out_dir)
    pairings = fileio.read_pairings(out_dir / "pairings.json")
    roots = stage_triangulate(bundle, pairings, config)
    path = out_dir / "roots_pre.json"
    fileio.write_json(
        path,
        [fileio.root_to_dict(pr.root, pr.observations, pr.boxes) for pr in roots],
    )
    return path


def _read_roots(path: Path) -> list[PipelineRoot]:
    roots = []
    for entry in fileio.read_json(path):
        root, observations, boxes = fileio.root_from_dict(entry)
        roots.append(PipelineRoot(root=root, observations=observations, boxes=boxes))
    return roots


def run_sba_stage(
    bundle_dir: Path, out_dir: Path, config: PipelineConfig
) -> tuple[Path, SbaReport]:
    bundle = load_bundle(bundle_dir, config)
    out_dir = Path(out_dir)
    roots = _read_roots(out_dir / "roots_pre.json")
    refined, report, views = stage_sba(bundle, roots, config)
    fileio.write_json(
        out_dir / "roots_refined.json",
        [fileio.root_to_dict(pr.root, pr.observations, pr.boxes) for pr in refined],
    )
    fileio.write_cameras(out_dir / "cameras_refined.json", views)
    fileio.write_sba_trace_csv(out_dir / "sba_trace.csv", report)
    return out_dir / "roots_refined.json", report


def run_connect_stage(bundle_dir: Path, out_dir: Path, config: PipelineConfig) -> Path:
    bundle = load_bundle(bundle_dir, config)
    out_dir = Path(out_dir)
    refined_cams = out_dir / "cameras_refined.json"
    views = fileio.read_cameras(refined_cams) if refined_cams.exists() else bundle.views
    roots_path = out_dir / "roots_refined.json"
    if not roots_path.exists():
        roots_path = out_dir / "roots_pre.json"
    roots = _read_roots(roots_path)
    skeleton = stage_connect(views, bundle.masks, roots, config)
    fileio.write_json(out_dir / "skeleton.json", fileio.skeleton_to_dict(skeleton))
    fileio.write_skeleton_ply(out_dir / "skeleton.ply", skeleton)
    return out_dir / "skeleton.json"


def run_evaluate_stage(bundle_dir: Path, out_dir: Path, config: PipelineConfig) -> Path:
    bundle = load_bundle(bundle_dir, config)
    out_dir = Path(out_dir)
    if bundle.ground_truth is None:
        raise MissingInput("ground_truth.json required for evaluation")
    skeleton = fileio.skeleton_from_dict(fileio.read_json(out_dir / "skeleton.json"))
    metrics = stage_evaluate(skeleton, bundle.ground_truth, config)
    fileio.write_json(out_dir / "metrics.json", metrics)
    return out_dir / "metrics.json"


def run_pipeline(
    bundle_dir: Path, config: PipelineConfig, output_dir: Path
) -> PipelineResult:
    """Full reconstruction; equivalent to chaining the stage functions.

    Writes pairings.json, roots_pre.json, roots_refined.json,
    cameras_refined.json, sba_trace.csv, skeleton.json, skeleton.ply,
    and (when ground truth is present) metrics.json.
    """
    bundle_dir = Path(bundle_dir)
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    run_match_stage(bundle_dir, output_dir, config)
    run_triangulate_stage(bundle_dir, output_dir, config)
    _, report = run_sba_stage(bundle_dir, output_dir, config)
    run_connect_stage(bundle_dir, output_dir, config)

    bundle = load_bundle(bundle_dir, config)
    skeleton = fileio.skeleton_from_dict(fileio.read_json(output_dir / "skeleton.json"))
    metrics = {}
    if bundle.ground_truth is not None:
        run_evaluate_stage(bundle_dir, output_dir, config)
        metrics = fileio.read_json(output_dir / "metrics.json")

    return PipelineResult(
        skeleton=skeleton, report=report, metrics=metrics, output_dir=output_dir
    )
