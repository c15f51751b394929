"""Precision/recall of recovered lateral roots in 2D and 3D.

Predictions and ground truth are matched one-to-one by a greedy pass
over candidate pairs sorted by mean endpoint distance; a matched pair
counts as a true positive only when BOTH endpoints fall within the
criterion threshold. The 3D threshold scales with the ground-truth
bounding-box diagonal so scores are scene-size invariant.

Conventions for empty inputs: no predictions means precision 1.0 (there
is nothing wrong among zero claims); no ground truth means recall 1.0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class MatchCriterion:
    """True-positive thresholds for the 2D and 3D metrics."""

    max_px_2d: float = 5.0
    max_diag_frac_3d: float = 0.02

    def __post_init__(self):
        if self.max_px_2d <= 0 or self.max_diag_frac_3d <= 0:
            raise ValidationError("criterion thresholds must be positive")


@dataclass(frozen=True)
class PrResult:
    precision: float
    recall: float
    true_positives: int
    num_pred: int
    num_gt: int

    def as_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "true_positives": self.true_positives,
            "num_pred": self.num_pred,
            "num_gt": self.num_gt,
        }


def greedy_assignment(pred_pts: np.ndarray, gt_pts: np.ndarray) -> list[tuple[int, int]]:
    """One-to-one assignment by ascending mean endpoint distance.

    ``pred_pts`` and ``gt_pts`` have shape (N, 2, D): start and end
    per root. Ties break on (pred index, gt index). The assignment is
    threshold-free; thresholds only decide which assigned pairs count.
    """
    if len(pred_pts) == 0 or len(gt_pts) == 0:
        return []
    diff = pred_pts[:, None, :, :] - gt_pts[None, :, :, :]
    dists = np.linalg.norm(diff, axis=3)  # (P, G, 2) per-endpoint distance
    mean_dist = dists.mean(axis=2)
    order = sorted(
        ((mean_dist[i, j], i, j) for i in range(len(pred_pts)) for j in range(len(gt_pts)))
    )
    used_pred: set[int] = set()
    used_gt: set[int] = set()
    pairs = []
    for _, i, j in order:
        if i in used_pred or j in used_gt:
            continue
        used_pred.add(i)
        used_gt.add(j)
        pairs.append((i, j))
    return pairs


def _pr_from_endpoints(pred_pts, gt_pts, threshold) -> PrResult:
    n_pred, n_gt = len(pred_pts), len(gt_pts)
    tp = 0
    for i, j in greedy_assignment(pred_pts, gt_pts):
        d = np.linalg.norm(pred_pts[i] - gt_pts[j], axis=1)
        if np.all(d <= threshold):
            tp += 1
    precision = 1.0 if n_pred == 0 else tp / n_pred
    recall = 1.0 if n_gt == 0 else tp / n_gt
    return PrResult(precision, recall, tp, n_pred, n_gt)


def pr_2d(pred, gt, criterion: MatchCriterion = MatchCriterion()) -> PrResult:
    """Endpoint precision/recall for 2D detections.

    Arguments are detection lists; their ``keypoints`` (start, end) are
    compared start-to-start and end-to-end against the pixel threshold.
    """
    pred_pts = np.array([d.keypoints[:2] for d in pred]).reshape(-1, 2, 2)
    gt_pts = np.array([d.keypoints[:2] for d in gt]).reshape(-1, 2, 2)
    return _pr_from_endpoints(pred_pts, gt_pts, criterion.max_px_2d)


def pr_3d(pred, gt_segments, criterion: MatchCriterion = MatchCriterion()) -> PrResult:
    """Endpoint precision/recall for fused 3D roots.

    ``pred`` is a list of objects with .start/.end; ``gt_segments`` is
    an (N, 2, 3) array (or list of (start, end) pairs) with N >= 1. The
    distance threshold is ``max_diag_frac_3d`` times the ground-truth
    bounding-box diagonal.
    """
    gt_pts = np.asarray(
        [[np.asarray(s, dtype=float), np.asarray(e, dtype=float)] for s, e in gt_segments]
    ).reshape(-1, 2, 3)
    if len(gt_pts) < 1:
        raise ValidationError("3D metric needs at least one ground-truth lateral")
    flat = gt_pts.reshape(-1, 3)
    diagonal = float(np.linalg.norm(flat.max(axis=0) - flat.min(axis=0)))
    pred_pts = np.array([[r.start, r.end] for r in pred]).reshape(-1, 2, 3)
    return _pr_from_endpoints(pred_pts, gt_pts, criterion.max_diag_frac_3d * diagonal)


def aggregate(results: list[PrResult]) -> dict:
    """Mean precision/recall over scenes, plus pooled counts."""
    if not results:
        raise ValidationError("nothing to aggregate")
    return {
        "mean_precision": float(np.mean([r.precision for r in results])),
        "mean_recall": float(np.mean([r.recall for r in results])),
        "scenes": len(results),
        "total_true_positives": int(sum(r.true_positives for r in results)),
        "total_pred": int(sum(r.num_pred for r in results)),
        "total_gt": int(sum(r.num_gt for r in results)),
    }
