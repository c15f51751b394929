from collections import Counter

import numpy as np
import pytest
from conftest import make_view

from rootskel.errors import StartOffMask, ValidationError
from rootskel.fusion import LateralRoot3D
from rootskel.mainroot import (
    BACKGROUND,
    UNLABELED,
    build_main_root,
    init_label_matrix,
    propagate_rows,
    retain_connections,
)


def propagate_oracle(matrix):
    """Naive per-run re-scan of the growth rules, no shortcuts."""
    m = [[float(v) for v in row] for row in matrix]
    h = len(m)
    w = len(m[0])
    ledger = Counter()
    for y in range(h):
        x = 0
        while x < w:
            if m[y][x] == float("inf"):
                x += 1
                continue
            x1 = x
            while x < w and m[y][x] != float("inf"):
                x += 1
            x2 = x - 1
            # mode over previous row cells holding a real label
            mode = None
            if y > 0:
                counts = {}
                for c in range(x1, x2 + 1):
                    v = m[y - 1][c]
                    if v != float("inf") and v != -1.0:
                        counts[v] = counts.get(v, 0) + 1
                if counts:
                    best = max(counts.values())
                    mode = min(v for v, n in counts.items() if n == best)
            starts = sorted({m[y][c] for c in range(x1, x2 + 1) if m[y][c] != -1.0})
            if starts:
                k = starts[0]
                for c in range(x1, x2 + 1):
                    m[y][c] = k
                if mode is not None:
                    for s in starts:
                        if s != mode:
                            ledger[(int(mode), int(s))] += 1
            elif mode is not None:
                for c in range(x1, x2 + 1):
                    m[y][c] = mode
    return np.array(m), ledger


class TestInitLabelMatrix:
    def test_empty_mask_no_starts(self):
        m = init_label_matrix(np.zeros((3, 4), dtype=bool), [])
        assert np.all(np.isinf(m))

    def test_single_foreground_start(self):
        fg = np.zeros((3, 3), dtype=bool)
        fg[1, 2] = True
        m = init_label_matrix(fg, [(np.array([2.0, 1.0]), 7)])
        assert m[1, 2] == 7.0
        assert np.isinf(m).sum() == 8

    def test_random_masks_match_definition(self, rng):
        for _ in range(20):
            fg = rng.random((12, 12)) < 0.4
            starts = []
            fg_cells = np.argwhere(fg)
            for idx, (r, c) in enumerate(fg_cells[:3]):
                starts.append((np.array([float(c), float(r)]), idx))
            m = init_label_matrix(fg, starts)
            start_map = {(int(round(p[1])), int(round(p[0]))): i for p, i in starts}
            for r in range(12):
                for c in range(12):
                    if (r, c) in start_map:
                        assert m[r, c] == start_map[(r, c)]
                    elif fg[r, c]:
                        assert m[r, c] == UNLABELED
                    else:
                        assert m[r, c] == BACKGROUND

    def test_snaps_within_radius(self):
        fg = np.zeros((8, 8), dtype=bool)
        fg[4, 4] = True
        m = init_label_matrix(fg, [(np.array([6.0, 4.0]), 3)])
        assert m[4, 4] == 3.0

    def test_too_far_raises(self):
        fg = np.zeros((8, 8), dtype=bool)
        fg[4, 4] = True
        with pytest.raises(StartOffMask):
            init_label_matrix(fg, [(np.array([0.0, 0.0]), 3)], snap_radius=3.0)

    def test_outside_image_raises(self):
        fg = np.ones((4, 4), dtype=bool)
        with pytest.raises(StartOffMask):
            init_label_matrix(fg, [(np.array([40.0, 1.0]), 0)])


class TestPropagateRows:
    def test_single_column_propagates_down(self):
        fg = np.zeros((3, 3), dtype=bool)
        fg[:, 1] = True
        m = init_label_matrix(fg, [(np.array([1.0, 0.0]), 0)])
        out, ledger = propagate_rows(m)
        assert (out[:, 1] == 0.0).all()
        assert ledger == Counter()

    def test_y_shape_records_junction(self):
        # root 0 grows down column 2; root 1 starts at (row 2, col 1)
        # inside the same run and takes it over
        fg = np.zeros((5, 5), dtype=bool)
        fg[:, 2] = True
        fg[2, 1] = True
        m = init_label_matrix(
            fg, [(np.array([2.0, 0.0]), 0), (np.array([1.0, 2.0]), 1)]
        )
        out, ledger = propagate_rows(m)
        assert ledger == Counter({(0, 1): 1})
        assert out[0, 2] == 0.0 and out[1, 2] == 0.0
        assert out[2, 1] == 1.0 and out[2, 2] == 1.0
        assert out[3, 2] == 1.0 and out[4, 2] == 1.0

    def test_disjoint_columns_stay_separate(self):
        fg = np.zeros((4, 5), dtype=bool)
        fg[:, 0] = True
        fg[:, 4] = True
        m = init_label_matrix(
            fg, [(np.array([0.0, 0.0]), 0), (np.array([4.0, 0.0]), 1)]
        )
        out, ledger = propagate_rows(m)
        assert (out[:, 0] == 0.0).all()
        assert (out[:, 4] == 1.0).all()
        assert ledger == Counter()

    def test_matches_naive_oracle_on_random_masks(self, rng):
        for _ in range(40):
            fg = rng.random((16, 16)) < rng.uniform(0.2, 0.7)
            cells = np.argwhere(fg)
            starts = []
            if len(cells):
                picks = rng.choice(len(cells), size=min(4, len(cells)), replace=False)
                for idx, pick in enumerate(picks):
                    r, c = cells[pick]
                    starts.append((np.array([float(c), float(r)]), idx))
            m = init_label_matrix(fg, starts)
            out, ledger = propagate_rows(m)
            want_out, want_ledger = propagate_oracle(m)
            assert np.array_equal(out, want_out)
            assert ledger == want_ledger

    def test_literal_update_variant_keeps_start_cells_only(self):
        fg = np.zeros((2, 3), dtype=bool)
        fg[0, 1] = True
        fg[1, :] = True
        m = init_label_matrix(
            fg, [(np.array([1.0, 0.0]), 0), (np.array([0.0, 1.0]), 1)]
        )
        out, ledger = propagate_rows(m, eq10_literal=True)
        # start cell keeps 1, the rest of the run inherits m = 0
        assert out[1, 0] == 1.0
        assert out[1, 1] == 0.0 and out[1, 2] == 0.0
        assert ledger == Counter({(0, 1): 1})

    def test_every_cell_visited_once_and_no_reachable_unlabeled(self):
        fg = np.zeros((6, 3), dtype=bool)
        fg[:, 1] = True
        m = init_label_matrix(fg, [(np.array([1.0, 0.0]), 0)])
        out, _ = propagate_rows(m)
        assert not np.any(out[:, 1] == UNLABELED)


class TestRetainConnections:
    def test_three_of_five_views_retained(self):
        ledgers = [Counter({(0, 1): 1}) for _ in range(3)] + [Counter(), Counter()]
        assert retain_connections(ledgers) == {(0, 1)}

    def test_single_occurrence_dropped(self):
        assert retain_connections([Counter({(2, 3): 1})]) == set()

    def test_orientation_pools(self):
        ledgers = [Counter({(0, 1): 1}), Counter({(1, 0): 1})]
        assert retain_connections(ledgers) == {(0, 1)}

    def test_monotone_in_min_count(self, rng):
        ledgers = []
        for _ in range(5):
            c = Counter()
            for _ in range(rng.integers(0, 6)):
                a, b = rng.integers(0, 5, size=2)
                if a != b:
                    c[(int(a), int(b))] += 1
            ledgers.append(c)
        prev = None
        for mc in range(1, 6):
            got = retain_connections(ledgers, min_count=mc)
            if prev is not None:
                assert got <= prev
            prev = got

    def test_self_connection_rejected(self):
        with pytest.raises(ValidationError):
            retain_connections([Counter({(1, 1): 2})])

    def test_empty_ledger_list_rejected(self):
        with pytest.raises(ValidationError):
            retain_connections([])


def make_root(root_id, start, direction=(0.4, 0.6, 0.0)):
    start = np.asarray(start, dtype=float)
    return LateralRoot3D(root_id, start, start + np.asarray(direction), 0.0, [0, 1])


class TestBuildMainRoot:
    def test_chain_ordered_top_down(self):
        view = make_view((0.0, 0.0, -10.0))
        roots = [
            make_root(0, (0.0, -1.0, 0.0)),
            make_root(1, (0.0, 0.0, 0.0)),
            make_root(2, (0.0, 1.0, 0.0)),
        ]
        graph = build_main_root(roots, {(1, 2), (0, 1)}, view)
        assert graph.components == [[0, 1, 2]]
        poly = graph.main_root_polylines()[0]
        assert np.allclose(poly[:, 1], [-1.0, 0.0, 1.0])
        assert graph.main_root_edges() == [(0, 1), (1, 2)]

    def test_empty_adjacency_keeps_laterals(self):
        view = make_view((0.0, 0.0, -10.0))
        roots = [make_root(0, (0.0, 0.0, 0.0)), make_root(1, (0.0, 1.0, 0.0))]
        graph = build_main_root(roots, set(), view)
        assert graph.components == []
        assert len(graph.laterals) == 2

    def test_permutation_invariance(self, rng):
        view = make_view((0.0, 0.0, -10.0))
        roots = [make_root(i, (0.1 * i, 0.3 * i, 0.0)) for i in range(6)]
        adjacency = {(0, 1), (1, 2), (4, 5)}
        base = build_main_root(roots, adjacency, view)
        perm = rng.permutation(6)
        shuffled = [roots[i] for i in perm]
        again = build_main_root(shuffled, adjacency, view)
        assert base.components == again.components

    def test_unknown_id_rejected(self):
        view = make_view((0.0, 0.0, -10.0))
        with pytest.raises(ValidationError):
            build_main_root([make_root(0, (0, 0, 0))], {(0, 9)}, view)
