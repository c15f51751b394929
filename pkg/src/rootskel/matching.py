"""Cross-view association of detection boxes via keypoint-match voting.

Each keypoint match between two views votes for every (box in view A
containing its first point, box in view B containing its second point)
pair; a greedy pass over the resulting vote matrix picks one-to-one box
pairings that clear a minimum vote count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detection import Detection2D
from .errors import ValidationError


@dataclass(frozen=True)
class KeypointMatch:
    """A matched point pair across two views."""

    p1: np.ndarray
    p2: np.ndarray
    confidence: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "p1", np.asarray(self.p1, dtype=float).reshape(2))
        object.__setattr__(self, "p2", np.asarray(self.p2, dtype=float).reshape(2))


@dataclass(frozen=True)
class BoxPair:
    """An accepted pairing: box ``a`` in view A matches box ``b`` in view B."""

    a: int
    b: int
    votes: int


def boxes_containing(point: np.ndarray, boxes: list[Detection2D]) -> list[int]:
    """Indices of all boxes containing the point (inclusive boundary)."""
    return [i for i, box in enumerate(boxes) if box.contains(point)]


def _smallest_box(indices: list[int], boxes: list[Detection2D]) -> list[int]:
    if not indices:
        return indices
    best = min(indices, key=lambda i: (float(boxes[i].size.prod()), i))
    return [best]


def build_score_matrix(
    matches: list[KeypointMatch],
    boxes_a: list[Detection2D],
    boxes_b: list[Detection2D],
    vote_smallest_box_only: bool = False,
) -> np.ndarray:
    """Tally votes into an (len(boxes_a), len(boxes_b)) integer matrix.

    By default a point inside several boxes votes for all of them
    (overlapping boxes legitimately cover parts of the same root);
    ``vote_smallest_box_only`` restricts each point to its
    smallest-area containing box.
    """
    scores = np.zeros((len(boxes_a), len(boxes_b)), dtype=np.int64)
    for match in matches:
        ia = boxes_containing(match.p1, boxes_a)
        ib = boxes_containing(match.p2, boxes_b)
        if vote_smallest_box_only:
            ia = _smallest_box(ia, boxes_a)
            ib = _smallest_box(ib, boxes_b)
        for i in ia:
            for j in ib:
                scores[i, j] += 1
    return scores


def greedy_pairing(matrix: np.ndarray, matching_threshold: int) -> list[BoxPair]:
    """Select one-to-one box pairings from a vote matrix.

    Repeatedly accepts the highest remaining cell (ties: smaller row,
    then smaller column) while it meets the vote threshold, removing
    its row and column. Deterministic for a given matrix.
    """
    if matching_threshold < 1:
        raise ValidationError("matching threshold must be >= 1")
    scores = np.array(matrix, dtype=np.int64, copy=True)
    if scores.ndim != 2:
        raise ValidationError("score matrix must be 2-D")
    if np.any(scores < 0):
        raise ValidationError("score matrix entries must be non-negative")

    pairs: list[BoxPair] = []
    while scores.size:
        flat = int(np.argmax(scores))  # row-major argmax = (smaller i, then j) on ties
        i, j = divmod(flat, scores.shape[1])
        best = int(scores[i, j])
        if best < matching_threshold:
            break
        pairs.append(BoxPair(i, j, best))
        scores[i, :] = -1
        scores[:, j] = -1
    return pairs
