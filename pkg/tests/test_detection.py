import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rootskel.detection import (
    AnchorSpec,
    Detection2D,
    LossWeights,
    RawCellPrediction,
    assign_slots,
    ciou,
    decode_box,
    decode_cell,
    decode_grids,
    decode_keypoints,
    encode_cell,
    encode_raw_grids,
    encode_target_grids,
    filter_detections,
    iou,
    multitask_loss,
)
from rootskel.errors import ShapeMismatch, ValidationError

ANCHOR = AnchorSpec(width=32.0, height=48.0, stride=8)


def raw(obj=0.0, box=(0.0, 0.0, 0.0, 0.0), kps=((0.0, 0.0), (0.0, 0.0))):
    return RawCellPrediction(obj, np.array(box), np.array(kps))


def make_det(cx, cy, w, h, kps, score=0.9):
    return Detection2D(
        center=(cx, cy),
        size=(w, h),
        score=score,
        keypoints=np.asarray(kps, dtype=float),
        visibility=np.ones(len(kps)),
    )


class TestDecodeBox:
    def test_zero_logits(self):
        grid_box, image_box = decode_box(raw(), ANCHOR, cell=(3, 5))
        assert np.allclose(grid_box, [0.5, 0.5, 32 / 8, 48 / 8])
        assert np.allclose(image_box, [8 * 3.5, 8 * 5.5, 32.0, 48.0])

    def test_center_offset_limits(self):
        hi, _ = decode_box(raw(box=(50.0, 50.0, 0.0, 0.0)), ANCHOR, (0, 0))
        lo, _ = decode_box(raw(box=(-50.0, -50.0, 0.0, 0.0)), ANCHOR, (0, 0))
        assert hi[0] == pytest.approx(1.5, abs=1e-9)
        assert hi[1] == pytest.approx(1.5, abs=1e-9)
        assert lo[0] == pytest.approx(-0.5, abs=1e-9)
        assert lo[1] == pytest.approx(-0.5, abs=1e-9)

    def test_size_cap_is_four_anchors(self):
        big, _ = decode_box(raw(box=(0.0, 0.0, 50.0, 50.0)), ANCHOR, (0, 0))
        assert big[2] == pytest.approx(4 * 32 / 8, abs=1e-6)
        assert big[3] == pytest.approx(4 * 48 / 8, abs=1e-6)


class TestDecodeKeypoints:
    def test_zero_logit_lands_on_cell_origin(self):
        grid, image = decode_keypoints(raw(), ANCHOR, cell=(2, 7))
        assert np.allclose(grid, 0.0)
        assert np.allclose(image, [[16.0, 56.0], [16.0, 56.0]])

    def test_offsets_bounded_by_two_anchor_widths(self):
        extreme = raw(kps=((20.0, -20.0), (-20.0, 20.0)))
        grid, _ = decode_keypoints(extreme, ANCHOR, (0, 0))
        bound = 2 * ANCHOR.width / ANCHOR.stride
        assert np.all(np.abs(grid) < bound)
        assert np.max(np.abs(grid)) == pytest.approx(bound, rel=1e-6)

    def test_vertical_scale_flag_uses_anchor_height(self):
        extreme = raw(kps=((20.0, 20.0), (20.0, 20.0)))
        grid, _ = decode_keypoints(extreme, ANCHOR, (0, 0), y_uses_anchor_height=True)
        assert grid[0, 1] == pytest.approx(2 * ANCHOR.height / ANCHOR.stride, rel=1e-6)

    @given(
        logits=st.lists(st.floats(-5.0, 5.0), min_size=9, max_size=9),
        flag=st.booleans(),
    )
    @settings(max_examples=200, deadline=None)
    def test_decode_encode_round_trip(self, logits, flag):
        r = raw(logits[0], logits[1:5], np.array(logits[5:]).reshape(2, 2))
        det = decode_cell(r, ANCHOR, cell=(4, 6), y_uses_anchor_height=flag)
        back, cell = encode_cell(det, ANCHOR, cell=(4, 6), y_uses_anchor_height=flag)
        assert cell == (4, 6)
        assert back.objectness == pytest.approx(logits[0], abs=1e-6)
        assert np.allclose(back.box, logits[1:5], atol=1e-6)
        assert np.allclose(back.keypoints.ravel(), logits[5:], atol=1e-6)


def ciou_oracle(a, b):
    """Independent step-by-step complete-IoU from corner coordinates."""
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    i = inter / union
    rho2 = (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2
    cw = max(ax2, bx2) - min(ax1, bx1)
    ch = max(ay2, by2) - min(ay1, by1)
    c2 = cw**2 + ch**2
    v = 4 / math.pi**2 * (math.atan(b[2] / b[3]) - math.atan(a[2] / a[3])) ** 2
    alpha = 0.0 if v == 0.0 else v / (1 - i + v)
    return i - rho2 / c2 - alpha * v


class TestCiou:
    def test_identical_boxes(self):
        box = np.array([10.0, 20.0, 5.0, 8.0])
        assert ciou(box, box) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint_same_shape_is_center_penalty(self):
        # Same aspect ratio kills the shape term; IoU is zero, so the
        # value reduces to -rho^2/c^2.
        a = np.array([0.0, 0.0, 2.0, 2.0])
        b = np.array([10.0, 0.0, 2.0, 2.0])
        rho2 = 100.0
        c2 = 12.0**2 + 2.0**2
        assert ciou(a, b) == pytest.approx(-rho2 / c2, abs=1e-12)

    def test_matches_independent_computation(self, rng):
        for _ in range(300):
            a = np.concatenate([rng.uniform(-20, 20, 2), rng.uniform(0.5, 30, 2)])
            b = np.concatenate([rng.uniform(-20, 20, 2), rng.uniform(0.5, 30, 2)])
            assert ciou(a, b) == pytest.approx(ciou_oracle(a, b), abs=1e-10)

    def test_range(self, rng):
        # The standard formula is bounded by (-2, 1]: the center and
        # aspect penalties each stay below 1.
        for _ in range(200):
            a = np.concatenate([rng.uniform(-50, 50, 2), rng.uniform(0.5, 30, 2)])
            b = np.concatenate([rng.uniform(-50, 50, 2), rng.uniform(0.5, 30, 2)])
            assert -2.0 < ciou(a, b) <= 1.0

    def test_rejects_bad_size(self):
        with pytest.raises(ValidationError):
            ciou(np.array([0, 0, -1.0, 1.0]), np.array([0, 0, 1.0, 1.0]))


def single_stride_weights(**kw):
    return LossWeights(stride_weights={8: 1.0}, **kw)


def single_stride_anchors():
    return {8: [AnchorSpec(32.0, 32.0, 8)]}


class TestMultitaskLoss:
    def setup_method(self):
        self.anchors = single_stride_anchors()
        self.image_size = (128, 128)
        self.dets = [
            make_det(40.0, 40.0, 30.0, 22.0, [[30.0, 30.0], [50.0, 50.0]], score=1.0),
            make_det(90.0, 70.0, 24.0, 24.0, [[80.0, 60.0], [100.0, 80.0]], score=1.0),
        ]

    def test_perfect_predictions_zero_box_and_kps(self):
        grids = encode_raw_grids(self.dets, self.image_size, self.anchors)
        targets = encode_target_grids(self.dets, self.image_size, self.anchors)
        loss = multitask_loss(grids, targets, single_stride_weights(), self.anchors)
        assert loss.box == pytest.approx(0.0, abs=1e-9)
        assert loss.keypoints == pytest.approx(0.0, abs=1e-9)

    def test_invisible_keypoints_contribute_nothing(self):
        grids = encode_raw_grids(self.dets, self.image_size, self.anchors)
        targets = encode_target_grids(self.dets, self.image_size, self.anchors)
        for t in targets.values():
            t.visibility[:] = 0.0
            t.keypoints += 100.0
        loss = multitask_loss(grids, targets, single_stride_weights(), self.anchors)
        assert loss.keypoints == 0.0

    def test_three_four_offset_gives_five(self):
        target_det = self.dets[0]
        shifted = make_det(
            40.0, 40.0, 30.0, 22.0,
            np.asarray(target_det.keypoints) + np.array([3.0, 4.0]),
            score=1.0,
        )
        grids = encode_raw_grids([shifted], self.image_size, self.anchors)
        targets = encode_target_grids([target_det], self.image_size, self.anchors)
        loss = multitask_loss(grids, targets, single_stride_weights(), self.anchors)
        # both keypoints moved by (3, 4) px -> 5 px each, summed per cell
        assert loss.keypoints == pytest.approx(10.0, abs=1e-6)

    def test_single_visible_keypoint_offset(self):
        target_det = self.dets[0]
        kps = np.asarray(target_det.keypoints).copy()
        kps[0] += np.array([3.0, 4.0])
        shifted = make_det(40.0, 40.0, 30.0, 22.0, kps, score=1.0)
        grids = encode_raw_grids([shifted], self.image_size, self.anchors)
        targets = encode_target_grids([target_det], self.image_size, self.anchors)
        loss = multitask_loss(grids, targets, single_stride_weights(), self.anchors)
        assert loss.keypoints == pytest.approx(5.0, abs=1e-6)

    def test_total_linear_in_each_lambda(self):
        grids = encode_raw_grids([self.dets[0]], self.image_size, self.anchors)
        targets = encode_target_grids(self.dets, self.image_size, self.anchors)

        def total(lo, lb, lk):
            w = LossWeights(
                stride_weights={8: 1.0}, lambda_obj=lo, lambda_box=lb, lambda_kps=lk
            )
            return multitask_loss(grids, targets, w, self.anchors).total

        base = total(0.0, 0.0, 0.0)
        assert base == 0.0
        for idx in range(3):
            lam = [0.0, 0.0, 0.0]
            lam[idx] = 1.0
            one = total(*lam)
            lam[idx] = 3.5
            assert total(*lam) == pytest.approx(3.5 * one, rel=1e-12)

    def test_no_objects_gives_zero_box_kps(self):
        grids = encode_raw_grids([], self.image_size, self.anchors)
        targets = encode_target_grids([], self.image_size, self.anchors)
        loss = multitask_loss(grids, targets, single_stride_weights(), self.anchors)
        assert loss.box == 0.0 and loss.keypoints == 0.0
        assert loss.objectness >= 0.0

    def test_shape_mismatch_rejected(self):
        grids = encode_raw_grids(self.dets, self.image_size, self.anchors)
        targets = encode_target_grids(self.dets, (64, 64), self.anchors)
        with pytest.raises(ShapeMismatch):
            multitask_loss(grids, targets, single_stride_weights(), self.anchors)


def nms_oracle(dets, score_thr, iou_thr):
    """Exhaustive O(n^2) suppression with corner-based IoU."""
    order = sorted(
        [i for i, d in enumerate(dets) if d.score >= score_thr],
        key=lambda i: (-dets[i].score, i),
    )
    kept = []
    for i in order:
        a = dets[i]
        ok = True
        for j in kept:
            b = dets[j]
            ax1, ay1 = a.center - a.size / 2
            ax2, ay2 = a.center + a.size / 2
            bx1, by1 = b.center - b.size / 2
            bx2, by2 = b.center + b.size / 2
            iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
            ih = max(0.0, min(ay2, by2) - max(ay1, by1))
            inter = iw * ih
            u = a.size.prod() + b.size.prod() - inter
            if u > 0 and inter / u > iou_thr:
                ok = False
                break
        if ok:
            kept.append(i)
    return [dets[i] for i in kept]


class TestFilterDetections:
    def test_empty(self):
        assert filter_detections([], 0.5, 0.5) == []

    def test_identical_boxes_keep_best(self):
        a = make_det(10, 10, 4, 4, [[9, 9], [11, 11]], score=0.9)
        b = make_det(10, 10, 4, 4, [[9, 9], [11, 11]], score=0.8)
        kept = filter_detections([b, a], 0.5, 0.5)
        assert len(kept) == 1 and kept[0].score == 0.9

    def test_matches_brute_force(self, rng):
        for _ in range(30):
            dets = [
                make_det(
                    rng.uniform(0, 100),
                    rng.uniform(0, 100),
                    rng.uniform(2, 40),
                    rng.uniform(2, 40),
                    [[0, 0], [1, 1]],
                    score=float(rng.uniform(0, 1)),
                )
                for _ in range(rng.integers(1, 25))
            ]
            got = filter_detections(dets, 0.3, 0.45)
            want = nms_oracle(dets, 0.3, 0.45)
            assert [d.box.tolist() for d in got] == [d.box.tolist() for d in want]

    def test_bad_threshold_rejected(self):
        with pytest.raises(ValidationError):
            filter_detections([], -0.1, 0.5)


class TestGridPipelines:
    def test_grid_round_trip_recovers_detections(self):
        anchors = single_stride_anchors()
        dets = [
            make_det(40.0, 40.0, 30.0, 22.0, [[30.0, 30.0], [50.0, 50.0]], score=0.9),
            make_det(90.0, 70.0, 24.0, 24.0, [[80.0, 60.0], [100.0, 80.0]], score=0.7),
        ]
        grids = encode_raw_grids(dets, (128, 128), anchors)
        decoded = decode_grids(grids, anchors, objectness_threshold=0.5)
        assert len(decoded) == 2
        decoded.sort(key=lambda d: d.center[0])
        for got, want in zip(decoded, sorted(dets, key=lambda d: d.center[0])):
            assert np.allclose(got.box, want.box, atol=1e-9)
            assert np.allclose(got.keypoints, want.keypoints, atol=1e-9)
            assert got.score == pytest.approx(want.score, abs=1e-7)

    def test_assignment_prefers_matching_anchor(self):
        anchors = {
            8: [AnchorSpec(16.0, 16.0, 8)],
            16: [AnchorSpec(64.0, 64.0, 16)],
        }
        small = make_det(40.0, 40.0, 14.0, 14.0, [[36, 36], [44, 44]])
        big = make_det(200.0, 200.0, 60.0, 60.0, [[180, 180], [220, 220]])
        slots = {id(d): slot for d, _, slot in assign_slots([small, big], (512, 512), anchors)}
        assert slots[id(small)].stride == 8
        assert slots[id(big)].stride == 16
