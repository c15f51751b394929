"""Main-root assembly by simulated top-down growth on a label matrix.

Each view contributes a label matrix the size of its image: background
cells hold +inf, unreached foreground holds -1, and the pixels of known
lateral-root starting points hold that root's index. Scanning rows from
the image top, every maximal run of foreground cells inherits the most
frequent root label from the previous row's slice unless the run
contains a start cell, which claims the run and records a junction
event (propagated label, new label). Junction events seen in at least
two views become adjacencies, and connected roots are strung into a
main-root polyline ordered by where their starts reproject vertically
in a reference view.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DegenerateProjection, StartOffMask, ValidationError
from .fusion import LateralRoot3D
from .geometry import CameraView, project

logger = logging.getLogger(__name__)

BACKGROUND = np.inf
UNLABELED = -1.0


@dataclass
class SkeletonGraph:
    """Lateral segments plus the adjacency and ordering of the main root.

    ``adjacency`` holds unordered root-id pairs stored as (small, large).
    ``components`` lists connected groups of root ids, each ordered
    top-down by the v coordinate of the reprojected start in the
    reference view; singleton groups are omitted (they contribute no
    main-root edge).
    """

    laterals: list[LateralRoot3D]
    adjacency: set[tuple[int, int]]
    components: list[list[int]] = field(default_factory=list)

    def main_root_polylines(self) -> list[np.ndarray]:
        """One polyline per component, through ordered start points."""
        by_id = {r.root_id: r for r in self.laterals}
        return [np.array([by_id[i].start for i in comp]) for comp in self.components]

    def main_root_edges(self) -> list[tuple[int, int]]:
        edges = []
        for comp in self.components:
            edges.extend(zip(comp, comp[1:]))
        return edges


def init_label_matrix(
    foreground: np.ndarray,
    starts: list[tuple[np.ndarray, int]],
    snap_radius: float = 3.0,
) -> np.ndarray:
    """Build the initial label matrix for one view.

    ``starts`` pairs a (u, v) pixel with its root index. Start pixels
    off the mask are snapped to the nearest foreground pixel within
    ``snap_radius``; farther ones raise StartOffMask.
    """
    fg = np.asarray(foreground, dtype=bool)
    m = np.full(fg.shape, BACKGROUND)
    m[fg] = UNLABELED
    if not starts:
        return m
    if not fg.any():
        raise StartOffMask("foreground mask is empty but starts were given")
    # distance to nearest foreground pixel, and that pixel's coordinates
    dist, (near_r, near_c) = ndimage.distance_transform_edt(~fg, return_indices=True)
    h, w = fg.shape
    for pixel, index in starts:
        if index < 0:
            raise ValidationError(f"root index must be non-negative, got {index}")
        u, v = float(pixel[0]), float(pixel[1])
        c, r = int(round(u)), int(round(v))
        if not (0 <= c < w and 0 <= r < h):
            raise StartOffMask(f"start {index} at ({u:.1f}, {v:.1f}) outside the image")
        if not fg[r, c]:
            if dist[r, c] > snap_radius:
                raise StartOffMask(
                    f"start {index} is {dist[r, c]:.2f} px from foreground (> {snap_radius})"
                )
            r, c = int(near_r[r, c]), int(near_c[r, c])
        m[r, c] = float(index)
    return m


def _runs(row_is_foreground: np.ndarray):
    """Maximal [x1, x2] (inclusive) runs of true cells in one row."""
    padded = np.concatenate([[False], row_is_foreground, [False]])
    diff = np.diff(padded.astype(np.int8))
    starts = np.nonzero(diff == 1)[0]
    ends = np.nonzero(diff == -1)[0] - 1
    return list(zip(starts, ends))


def _mode_label(values: np.ndarray) -> float | None:
    """Most frequent real label, ignoring background and unlabeled cells.

    Ties break toward the smallest label.
    """
    labels = values[np.isfinite(values) & (values != UNLABELED)]
    if labels.size == 0:
        return None
    uniq, counts = np.unique(labels, return_counts=True)
    return float(uniq[np.argmax(counts)])  # uniq sorted -> smallest label wins ties


def propagate_rows(
    matrix: np.ndarray, eq10_literal: bool = False
) -> tuple[np.ndarray, Counter]:
    """Grow labels downward row by row, recording junction events.

    For each foreground run: the previous row's slice over the run
    yields the propagated label ``m`` (mode over labeled cells). A run
    holding one or more start cells adopts the smallest start label and
    records (m, k) for every distinct start label k != m; a run with no
    start adopts ``m``; a run with neither stays unlabeled.

    ``eq10_literal`` switches to the case-wise variant where only
    unlabeled cells receive ``m`` and start cells keep their own label
    (junction events are recorded identically).
    """
    out = np.array(matrix, dtype=float, copy=True)
    ledger: Counter = Counter()
    height = out.shape[0]
    for y in range(height):
        row = out[y]
        for x1, x2 in _runs(np.isfinite(row)):
            run = row[x1 : x2 + 1]
            m = _mode_label(out[y - 1, x1 : x2 + 1]) if y > 0 else None
            start_labels = sorted(set(run[run != UNLABELED].tolist()))
            if start_labels:
                k = start_labels[0]
                if len(start_labels) > 1:
                    logger.warning(
                        "row %d run [%d, %d] holds %d start labels; treating as one junction",
                        y,
                        x1,
                        x2,
                        len(start_labels),
                    )
                if eq10_literal:
                    if m is not None:
                        run[run == UNLABELED] = m
                else:
                    run[:] = k
                if m is not None:
                    for label in start_labels:
                        if label != m:
                            ledger[(int(m), int(label))] += 1
            elif m is not None:
                run[:] = m
    return out, ledger


def retain_connections(ledgers: list[Counter], min_count: int = 2) -> set[tuple[int, int]]:
    """Keep junction pairs whose total count across views reaches min_count.

    Pairs are unordered: (m, k) and (k, m) pool their counts; the
    retained pair is stored as (small, large).
    """
    if not ledgers:
        raise ValidationError("at least one ledger is required")
    pooled: Counter = Counter()
    for ledger in ledgers:
        for (m, k), count in ledger.items():
            if m == k:
                raise ValidationError(f"self-connection ({m}, {k}) in ledger")
            pooled[(min(m, k), max(m, k))] += count
    return {pair for pair, count in pooled.items() if count >= min_count}


class _DisjointSet:
    def __init__(self, items):
        self.parent = {i: i for i in items}

    def find(self, i):
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def build_main_root(
    laterals: list[LateralRoot3D],
    adjacency: set[tuple[int, int]],
    reference_view: CameraView,
) -> SkeletonGraph:
    """Group adjacent roots and order each group top-down.

    Ordering key is the v coordinate of each root's start reprojected
    into the reference view (ascending = image top first); roots whose
    start cannot be projected sort last. Groups of one root contribute
    no main-root segment.
    """
    ids = [r.root_id for r in laterals]
    if len(set(ids)) != len(ids):
        raise ValidationError("lateral root ids must be unique")
    known = set(ids)
    for a, b in adjacency:
        if a not in known or b not in known:
            raise ValidationError(f"adjacency ({a}, {b}) references unknown root ids")

    dsu = _DisjointSet(ids)
    for a, b in adjacency:
        dsu.union(a, b)
    groups: dict[int, list[int]] = {}
    for i in ids:
        groups.setdefault(dsu.find(i), []).append(i)

    def order_key(root: LateralRoot3D):
        try:
            v = float(project(reference_view, root.start)[1])
        except DegenerateProjection:
            v = np.inf
        return (v, root.root_id)

    by_id = {r.root_id: r for r in laterals}
    components = []
    for members in groups.values():
        if len(members) < 2:
            continue
        components.append(sorted(members, key=lambda i: order_key(by_id[i])))
    # deterministic component order: by their topmost start
    components.sort(key=lambda comp: order_key(by_id[comp[0]]))
    normalized = {(min(a, b), max(a, b)) for a, b in adjacency}
    return SkeletonGraph(laterals=list(laterals), adjacency=normalized, components=components)
