import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rootskel.detection import Detection2D
from rootskel.errors import ValidationError
from rootskel.matching import (
    BoxPair,
    KeypointMatch,
    boxes_containing,
    build_score_matrix,
    greedy_pairing,
)


def box(cx, cy, w, h):
    return Detection2D(
        center=(cx, cy),
        size=(w, h),
        score=1.0,
        keypoints=[[cx, cy], [cx, cy]],
        visibility=[1, 1],
    )


class TestBoxesContaining:
    def test_point_outside_everything(self):
        boxes = [box(0, 0, 2, 2), box(10, 10, 2, 2)]
        assert boxes_containing(np.array([5.0, 5.0]), boxes) == []

    def test_corner_is_inclusive(self):
        boxes = [box(0, 0, 2, 2)]
        assert boxes_containing(np.array([1.0, 1.0]), boxes) == [0]

    def test_nested_boxes_both_returned(self, rng):
        for _ in range(50):
            c = rng.uniform(-5, 5, 2)
            inner = box(c[0], c[1], 2, 2)
            outer = box(c[0], c[1], 8, 8)
            p = c + rng.uniform(-1, 1, 2)
            got = boxes_containing(p, [inner, outer])
            # brute-force containment check
            want = []
            for i, b in enumerate([inner, outer]):
                lo = b.center - b.size / 2
                hi = b.center + b.size / 2
                if lo[0] <= p[0] <= hi[0] and lo[1] <= p[1] <= hi[1]:
                    want.append(i)
            assert got == want == [0, 1]


class TestBuildScoreMatrix:
    def test_single_match_single_cell(self):
        boxes_a = [box(0, 0, 2, 2), box(20, 0, 2, 2)]
        boxes_b = [box(0, 0, 2, 2)] * 3 + [box(30, 30, 2, 2)]
        m = build_score_matrix(
            [KeypointMatch(p1=[20.0, 0.0], p2=[30.0, 30.0])], boxes_a, boxes_b
        )
        want = np.zeros((2, 4), dtype=int)
        want[1, 3] = 1
        assert (m == want).all()

    def test_no_matches_zero_matrix(self):
        m = build_score_matrix([], [box(0, 0, 2, 2)], [box(0, 0, 2, 2)])
        assert m.shape == (1, 1) and m.sum() == 0

    def test_matches_brute_force_tally(self, rng):
        boxes_a = [box(*rng.uniform(0, 50, 2), *rng.uniform(2, 25, 2)) for _ in range(8)]
        boxes_b = [box(*rng.uniform(0, 50, 2), *rng.uniform(2, 25, 2)) for _ in range(6)]
        matches = [
            KeypointMatch(p1=rng.uniform(0, 50, 2), p2=rng.uniform(0, 50, 2))
            for _ in range(50)
        ]
        got = build_score_matrix(matches, boxes_a, boxes_b)
        want = np.zeros((8, 6), dtype=int)
        for m in matches:
            for i, a in enumerate(boxes_a):
                for j, b in enumerate(boxes_b):
                    if a.contains(m.p1) and b.contains(m.p2):
                        want[i, j] += 1
        assert (got == want).all()

    def test_vote_smallest_box_only(self):
        inner = box(0, 0, 2, 2)
        outer = box(0, 0, 10, 10)
        m = build_score_matrix(
            [KeypointMatch(p1=[0.0, 0.0], p2=[0.0, 0.0])],
            [inner, outer],
            [outer, inner],
            vote_smallest_box_only=True,
        )
        want = np.zeros((2, 2), dtype=int)
        want[0, 1] = 1
        assert (m == want).all()

    def test_order_independence(self, rng):
        boxes_a = [box(*rng.uniform(0, 50, 2), *rng.uniform(2, 25, 2)) for _ in range(5)]
        boxes_b = [box(*rng.uniform(0, 50, 2), *rng.uniform(2, 25, 2)) for _ in range(5)]
        matches = [
            KeypointMatch(p1=rng.uniform(0, 50, 2), p2=rng.uniform(0, 50, 2))
            for _ in range(40)
        ]
        m1 = build_score_matrix(matches, boxes_a, boxes_b)
        perm = rng.permutation(len(matches))
        m2 = build_score_matrix([matches[i] for i in perm], boxes_a, boxes_b)
        assert (m1 == m2).all()


class TestGreedyPairing:
    def test_hand_simulated(self):
        m = np.array([[5, 1], [2, 4]])
        assert greedy_pairing(m, 2) == [BoxPair(0, 0, 5), BoxPair(1, 1, 4)]

    def test_threshold_blocks_all(self):
        m = np.array([[5, 1], [2, 4]])
        assert greedy_pairing(m, 6) == []

    def test_tie_break_order(self):
        m = np.array([[3, 3], [3, 3]])
        assert greedy_pairing(m, 1) == [BoxPair(0, 0, 3), BoxPair(1, 1, 3)]

    def test_injective_and_above_threshold(self, rng):
        for _ in range(50):
            m = rng.integers(0, 12, size=(rng.integers(1, 9), rng.integers(1, 9)))
            pairs = greedy_pairing(m, 3)
            rows = [p.a for p in pairs]
            cols = [p.b for p in pairs]
            assert len(rows) == len(set(rows))
            assert len(cols) == len(set(cols))
            assert all(p.votes >= 3 for p in pairs)
            assert all(m[p.a, p.b] == p.votes for p in pairs)

    def test_empty_matrix(self):
        assert greedy_pairing(np.zeros((0, 0), dtype=int), 1) == []

    def test_bad_threshold(self):
        with pytest.raises(ValidationError):
            greedy_pairing(np.zeros((1, 1), dtype=int), 0)

    @given(
        st.lists(
            st.lists(st.integers(0, 20), min_size=3, max_size=3),
            min_size=3,
            max_size=3,
        )
    )
    @settings(max_examples=100, deadline=None)
    def test_matches_sequential_simulation(self, rows):
        # Simulate the greedy rule one step at a time with plain Python.
        m = np.array(rows)
        got = greedy_pairing(m, 2)
        sim = []
        alive = m.astype(float)
        while True:
            best, bi, bj = -1.0, None, None
            for i in range(3):
                for j in range(3):
                    if alive[i, j] > best:
                        best, bi, bj = alive[i, j], i, j
            if best < 2:
                break
            sim.append(BoxPair(bi, bj, int(best)))
            alive[bi, :] = -1
            alive[:, bj] = -1
        assert got == sim
