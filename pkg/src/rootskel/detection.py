"""Anchor-grid detection codec: decoding, encoding, CIoU, losses, NMS.

A "raw grid" is what a detection network head would emit for one stride:
an array of shape (rows, cols, anchors, 1 + 4 + 2K) holding logits in the
channel order [objectness, box x, box y, box w, box h, kp1 x, kp1 y, ...].
Grid cells are addressed as (cell_x, cell_y) = (column, row); arrays are
indexed [row, col, anchor, channel]. Decoding maps logits to image-space
boxes and keypoints; encoding is its exact inverse, which lets synthetic
scenes stand in for network output.

Decoded offsets are range-limited by construction: box center offsets lie
in (-0.5, 1.5) cell units, box sizes in (0, 4) anchor units, keypoint
offsets within +/-2 anchor widths of the cell origin.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch, ValidationError

logger = logging.getLogger(__name__)

STRIDES = (8, 16, 32, 64)

#: channels per anchor: objectness + box(4) + K keypoints x 2
NUM_KEYPOINTS = 2
CHANNELS = 1 + 4 + 2 * NUM_KEYPOINTS

# Objectness logit written into cells that contain no object.
BACKGROUND_LOGIT = -20.0
_SCORE_CLIP = 1e-9


@dataclass(frozen=True)
class AnchorSpec:
    """Prior box (width, height) in pixels for one stride level."""

    width: float
    height: float
    stride: int

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValidationError("anchor sides must be positive")
        if self.stride not in STRIDES:
            raise ValidationError(f"stride {self.stride} not in {STRIDES}")


@dataclass(frozen=True)
class RawCellPrediction:
    """Logits for one (cell, anchor) slot.

    box holds (x, y, w, h) logits, keypoints holds (K, 2) logits.
    """

    objectness: float
    box: np.ndarray
    keypoints: np.ndarray

    def __post_init__(self):
        box = np.asarray(self.box, dtype=float).reshape(4)
        kps = np.asarray(self.keypoints, dtype=float).reshape(-1, 2)
        if not (np.all(np.isfinite(box)) and np.all(np.isfinite(kps)) and math.isfinite(self.objectness)):
            raise ValidationError("logits must be finite")
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "keypoints", kps)


@dataclass(frozen=True)
class GridSlot:
    """Provenance of a decoded detection inside the prediction grids."""

    stride: int
    cell_x: int
    cell_y: int
    anchor: int


@dataclass
class Detection2D:
    """One lateral root in one view: box, confidence, start/end keypoints.

    keypoints[0] is the start point (junction end), keypoints[1] the tip.
    """

    center: np.ndarray
    size: np.ndarray
    score: float
    keypoints: np.ndarray
    visibility: np.ndarray
    slot: GridSlot | None = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(2)
        self.size = np.asarray(self.size, dtype=float).reshape(2)
        self.keypoints = np.asarray(self.keypoints, dtype=float).reshape(-1, 2)
        self.visibility = np.asarray(self.visibility, dtype=float).reshape(-1)
        if not (self.size > 0).all():
            raise ValidationError(f"box size must be positive, got {self.size}")
        if not (0.0 <= self.score <= 1.0):
            raise ValidationError(f"score must be in [0, 1], got {self.score}")
        if self.keypoints.shape[0] != self.visibility.shape[0]:
            raise ValidationError("keypoints and visibility length mismatch")

    @property
    def start(self) -> np.ndarray:
        return self.keypoints[0]

    @property
    def end(self) -> np.ndarray:
        return self.keypoints[1]

    @property
    def box(self) -> np.ndarray:
        """(cx, cy, w, h) in image pixels."""
        return np.concatenate([self.center, self.size])

    def contains(self, point: np.ndarray) -> bool:
        """Axis-aligned containment with inclusive boundary."""
        p = np.asarray(point, dtype=float).reshape(2)
        half = self.size / 2.0
        return bool(np.all(np.abs(p - self.center) <= half))


@dataclass(frozen=True)
class LossWeights:
    """Per-stride and per-task loss weights plus the batch size."""

    stride_weights: dict = field(
        default_factory=lambda: {8: 4.0, 16: 1.0, 32: 0.25, 64: 0.06}
    )
    lambda_obj: float = 1.0
    lambda_box: float = 7.5
    lambda_kps: float = 12.0
    batch_size: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError("batch size must be >= 1")
        weights = [self.lambda_obj, self.lambda_box, self.lambda_kps, *self.stride_weights.values()]
        if any(w < 0 for w in weights):
            raise ValidationError("loss weights must be non-negative")


@dataclass
class TargetGrid:
    """Ground-truth tensors for one stride, in image units.

    objectness: (rows, cols, anchors) in {0, 1}
    boxes: (rows, cols, anchors, 4) as (cx, cy, w, h) pixels
    keypoints: (rows, cols, anchors, K, 2) pixels
    visibility: (rows, cols, anchors, K) in {0, 1}
    """

    objectness: np.ndarray
    boxes: np.ndarray
    keypoints: np.ndarray
    visibility: np.ndarray

    @classmethod
    def empty(cls, rows: int, cols: int, anchors: int, num_keypoints: int = NUM_KEYPOINTS):
        return cls(
            objectness=np.zeros((rows, cols, anchors)),
            boxes=np.zeros((rows, cols, anchors, 4)),
            keypoints=np.zeros((rows, cols, anchors, num_keypoints, 2)),
            visibility=np.zeros((rows, cols, anchors, num_keypoints)),
        )


@dataclass(frozen=True)
class LossBreakdown:
    objectness: float
    box: float
    keypoints: float
    total: float


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p / (1.0 - p))


# ---------------------------------------------------------------------------
# per-cell decode / encode
# ---------------------------------------------------------------------------

def decode_box(raw: RawCellPrediction, anchor: AnchorSpec, cell: tuple[int, int]):
    """Decode box logits for one cell.

    Returns (grid_box, image_box): grid_box = (tx, ty, tw, th) in cell
    units relative to the cell origin; image_box = (cx, cy, w, h) pixels.
    """
    s = anchor.stride
    sx, sy, sw, sh = sigmoid(raw.box)
    tx = 2.0 * sx - 0.5
    ty = 2.0 * sy - 0.5
    tw = (anchor.width / s) * (2.0 * sw) ** 2
    th = (anchor.height / s) * (2.0 * sh) ** 2
    grid_box = np.array([tx, ty, tw, th])
    cx, cy = cell
    image_box = np.array([s * (cx + tx), s * (cy + ty), s * tw, s * th])
    return grid_box, image_box


def decode_keypoints(
    raw: RawCellPrediction,
    anchor: AnchorSpec,
    cell: tuple[int, int],
    y_uses_anchor_height: bool = False,
):
    """Decode keypoint logits for one cell.

    Returns (grid_kps, image_kps) of shape (K, 2). Both axes scale with
    the anchor width by default; ``y_uses_anchor_height`` switches the
    vertical axis to the anchor height instead.
    """
    s = anchor.stride
    scale_x = anchor.width / s
    scale_y = (anchor.height if y_uses_anchor_height else anchor.width) / s
    sig = sigmoid(raw.keypoints)
    grid = np.empty_like(sig)
    grid[:, 0] = scale_x * (4.0 * sig[:, 0] - 2.0)
    grid[:, 1] = scale_y * (4.0 * sig[:, 1] - 2.0)
    image = s * (np.asarray(cell, dtype=float) + grid)
    return grid, image


def decode_cell(
    raw: RawCellPrediction,
    anchor: AnchorSpec,
    cell: tuple[int, int],
    y_uses_anchor_height: bool = False,
) -> Detection2D:
    _, image_box = decode_box(raw, anchor, cell)
    _, image_kps = decode_keypoints(raw, anchor, cell, y_uses_anchor_height)
    return Detection2D(
        center=image_box[:2],
        size=image_box[2:],
        score=float(sigmoid(raw.objectness)),
        keypoints=image_kps,
        visibility=np.ones(image_kps.shape[0]),
        slot=GridSlot(anchor.stride, cell[0], cell[1], 0),
    )


def encode_cell(
    det: Detection2D,
    anchor: AnchorSpec,
    cell: tuple[int, int] | None = None,
    y_uses_anchor_height: bool = False,
) -> tuple[RawCellPrediction, tuple[int, int]]:
    """Exact inverse of decoding for one detection.

    When ``cell`` is omitted the owning cell is the one containing the
    box center. Raises ValidationError if the geometry is not
    representable for this anchor (size >= 4 anchors, keypoints farther
    than 2 anchor widths from the cell origin, or a center offset
    outside the decodable range).
    """
    s = anchor.stride
    if cell is None:
        cell = (int(math.floor(det.center[0] / s)), int(math.floor(det.center[1] / s)))
    cx, cy = cell

    tx = det.center[0] / s - cx
    ty = det.center[1] / s - cy
    tw = det.size[0] / s
    th = det.size[1] / s
    if not (-0.5 < tx < 1.5 and -0.5 < ty < 1.5):
        raise ValidationError(f"center offset ({tx:.3f}, {ty:.3f}) outside (-0.5, 1.5)")
    rw = tw * s / anchor.width
    rh = th * s / anchor.height
    if not (0.0 < rw < 4.0 and 0.0 < rh < 4.0):
        raise ValidationError("box size not representable for this anchor")
    box_logits = np.array(
        [
            logit((tx + 0.5) / 2.0),
            logit((ty + 0.5) / 2.0),
            logit(math.sqrt(rw) / 2.0),
            logit(math.sqrt(rh) / 2.0),
        ]
    )

    scale_x = anchor.width / s
    scale_y = (anchor.height if y_uses_anchor_height else anchor.width) / s
    grid_kps = det.keypoints / s - np.array(cell, dtype=float)
    ux = grid_kps[:, 0] / scale_x
    uy = grid_kps[:, 1] / scale_y
    if np.any(np.abs(ux) >= 2.0) or np.any(np.abs(uy) >= 2.0):
        raise ValidationError("keypoint offset not representable for this anchor")
    kp_logits = np.stack([logit((ux + 2.0) / 4.0), logit((uy + 2.0) / 4.0)], axis=1)

    score = min(max(det.score, _SCORE_CLIP), 1.0 - _SCORE_CLIP)
    return RawCellPrediction(float(logit(score)), box_logits, kp_logits), cell


# ---------------------------------------------------------------------------
# box similarity
# ---------------------------------------------------------------------------

def iou(box_a: np.ndarray, box_b: np.ndarray) -> float:
    """Intersection over union of two (cx, cy, w, h) boxes."""
    a = np.asarray(box_a, dtype=float)
    b = np.asarray(box_b, dtype=float)
    ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2
    ax2, ay2 = a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2
    bx2, by2 = b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def ciou(box_a: np.ndarray, box_b: np.ndarray) -> float:
    """Complete IoU: IoU minus center-distance and aspect-ratio penalties.

    Value lies in (-1, 1], reaching 1 only for identical boxes.
    """
    a = np.asarray(box_a, dtype=float)
    b = np.asarray(box_b, dtype=float)
    if not ((a[2:] > 0).all() and (b[2:] > 0).all()):
        raise ValidationError("boxes must have positive size")
    base = iou(a, b)

    rho2 = float((a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2)
    ex1 = min(a[0] - a[2] / 2, b[0] - b[2] / 2)
    ey1 = min(a[1] - a[3] / 2, b[1] - b[3] / 2)
    ex2 = max(a[0] + a[2] / 2, b[0] + b[2] / 2)
    ey2 = max(a[1] + a[3] / 2, b[1] + b[3] / 2)
    c2 = float((ex2 - ex1) ** 2 + (ey2 - ey1) ** 2)
    center_term = rho2 / c2 if c2 > 0 else 0.0

    v = (4.0 / math.pi**2) * (math.atan(b[2] / b[3]) - math.atan(a[2] / a[3])) ** 2
    alpha = v / ((1.0 - base) + v) if v > 0 else 0.0
    return base - center_term - alpha * v


# ---------------------------------------------------------------------------
# multi-task loss
# ---------------------------------------------------------------------------

def _bce(prob: np.ndarray, target: np.ndarray) -> np.ndarray:
    p = np.clip(prob, 1e-12, 1.0 - 1e-12)
    return -(target * np.log(p) + (1.0 - target) * np.log(1.0 - p))


def _decode_grid_arrays(grid: np.ndarray, anchors: list[AnchorSpec], y_uses_anchor_height=False):
    """Vectorized decode of a full raw grid.

    Returns (scores, boxes_px, keypoints_px) with shapes
    (rows, cols, A), (rows, cols, A, 4), (rows, cols, A, K, 2).
    """
    rows, cols, num_anchors, channels = grid.shape
    k = (channels - 5) // 2
    s = anchors[0].stride
    aw = np.array([a.width for a in anchors])
    ah = np.array([a.height for a in anchors])

    sig = sigmoid(grid)
    scores = sig[..., 0]
    tx = 2.0 * sig[..., 1] - 0.5
    ty = 2.0 * sig[..., 2] - 0.5
    tw = (aw / s) * (2.0 * sig[..., 3]) ** 2
    th = (ah / s) * (2.0 * sig[..., 4]) ** 2
    gx = np.arange(cols).reshape(1, cols, 1)
    gy = np.arange(rows).reshape(rows, 1, 1)
    boxes = np.stack([s * (gx + tx), s * (gy + ty), s * tw, s * th], axis=-1)

    kp_sig = sig[..., 5:].reshape(rows, cols, num_anchors, k, 2)
    scale_x = (aw / s).reshape(1, 1, num_anchors, 1)
    scale_y = ((ah if y_uses_anchor_height else aw) / s).reshape(1, 1, num_anchors, 1)
    off_x = scale_x * (4.0 * kp_sig[..., 0] - 2.0)
    off_y = scale_y * (4.0 * kp_sig[..., 1] - 2.0)
    kps = np.stack(
        [s * (gx.reshape(1, cols, 1, 1) + off_x), s * (gy.reshape(rows, 1, 1, 1) + off_y)],
        axis=-1,
    )
    return scores, boxes, kps


def multitask_loss(
    predictions: dict[int, np.ndarray],
    targets: dict[int, TargetGrid],
    weights: LossWeights,
    anchors: dict[int, list[AnchorSpec]],
    y_uses_anchor_height: bool = False,
) -> LossBreakdown:
    """Evaluate the detection training objective on raw grids.

    The objectness term is a BCE averaged over every (cell, anchor) slot
    per stride, against the target ``p_o * CIoU(decoded box, target
    box)`` (the CIoU-modulated target is taken literally even though it
    couples the objectness target to the box prediction). Box and
    keypoint terms average over object slots only; a stride with no
    objects contributes zero. Keypoint distances are Euclidean in
    pixels, gated per keypoint by visibility. The total is
    ``batch_size * (lambda_obj * L_obj + lambda_box * L_box +
    lambda_kps * L_kps)``.
    """
    if set(predictions) != set(targets):
        raise ShapeMismatch(f"stride sets differ: {sorted(predictions)} vs {sorted(targets)}")

    l_obj = l_box = l_kps = 0.0
    for s in sorted(predictions):
        pred = predictions[s]
        tgt = targets[s]
        if pred.ndim != 4:
            raise ShapeMismatch(f"stride {s}: raw grid must be 4-D, got {pred.shape}")
        if tgt.objectness.shape != pred.shape[:3]:
            raise ShapeMismatch(
                f"stride {s}: target shape {tgt.objectness.shape} vs grid {pred.shape[:3]}"
            )
        scores, boxes, kps = _decode_grid_arrays(pred, anchors[s], y_uses_anchor_height)

        obj_cells = np.argwhere(tgt.objectness > 0)
        bce_target = np.zeros_like(scores)
        ciou_vals = np.empty(len(obj_cells))
        for n, (r, c, a) in enumerate(obj_cells):
            ciou_vals[n] = ciou(boxes[r, c, a], tgt.boxes[r, c, a])
            bce_target[r, c, a] = tgt.objectness[r, c, a] * ciou_vals[n]
        l_obj += weights.stride_weights.get(s, 1.0) * float(np.mean(_bce(scores, bce_target)))

        if len(obj_cells):
            l_box += float(np.mean(1.0 - ciou_vals))
            per_cell = np.zeros(len(obj_cells))
            for n, (r, c, a) in enumerate(obj_cells):
                d = np.linalg.norm(kps[r, c, a] - tgt.keypoints[r, c, a], axis=1)
                per_cell[n] = float(np.sum(tgt.visibility[r, c, a] * d))
            l_kps += float(np.mean(per_cell))

    total = weights.batch_size * (
        weights.lambda_obj * l_obj + weights.lambda_box * l_box + weights.lambda_kps * l_kps
    )
    return LossBreakdown(l_obj, l_box, l_kps, total)


# ---------------------------------------------------------------------------
# confidence filter + NMS
# ---------------------------------------------------------------------------

def filter_detections(
    detections: list[Detection2D],
    objectness_threshold: float,
    iou_threshold: float,
) -> list[Detection2D]:
    """Confidence filter followed by greedy IoU suppression.

    Deterministic: candidates are visited in descending score with ties
    broken by input position (grid order for decoded grids); a candidate
    is dropped when its IoU with any higher-ranked kept box exceeds the
    threshold.
    """
    if not (0.0 <= objectness_threshold <= 1.0 and 0.0 <= iou_threshold <= 1.0):
        raise ValidationError("thresholds must lie in [0, 1]")
    candidates = [
        (i, d) for i, d in enumerate(detections) if d.score >= objectness_threshold
    ]
    candidates.sort(key=lambda item: (-item[1].score, item[0]))
    kept: list[Detection2D] = []
    for _, det in candidates:
        if all(iou(det.box, k.box) <= iou_threshold for k in kept):
            kept.append(det)
    return kept


# ---------------------------------------------------------------------------
# target assignment / synthetic grid construction
# ---------------------------------------------------------------------------

def default_anchors() -> dict[int, list[AnchorSpec]]:
    """One anchor per stride, sized proportionally to the stride."""
    return {s: [AnchorSpec(4.0 * s, 4.0 * s, s)] for s in STRIDES}


def grid_shape(image_size: tuple[int, int], stride: int) -> tuple[int, int]:
    w, h = image_size
    return (int(math.ceil(h / stride)), int(math.ceil(w / stride)))


def _anchor_fit(det: Detection2D, anchor: AnchorSpec) -> float:
    """Shape-only IoU between the detection box and an anchor prior."""
    w, h = det.size
    inter = min(w, anchor.width) * min(h, anchor.height)
    union = w * h + anchor.width * anchor.height - inter
    return inter / union


def _representable(det: Detection2D, anchor: AnchorSpec, y_uses_anchor_height=False) -> bool:
    try:
        encode_cell(det, anchor, None, y_uses_anchor_height)
    except ValidationError:
        return False
    return True


def assign_slots(
    detections: list[Detection2D],
    image_size: tuple[int, int],
    anchors: dict[int, list[AnchorSpec]] | None = None,
    y_uses_anchor_height: bool = False,
) -> list[tuple[Detection2D, AnchorSpec, GridSlot]]:
    """Give each detection a (stride, anchor, cell) slot.

    The anchor with the best shape IoU among those that can represent
    the geometry wins; the cell is the one containing the box center.
    Detections that collide on a slot or fit no anchor are dropped with
    a log message.
    """
    anchors = anchors or default_anchors()
    taken: set[GridSlot] = set()
    out = []
    for det in detections:
        ranked = sorted(
            (a for group in anchors.values() for a in group),
            key=lambda a: -_anchor_fit(det, a),
        )
        placed = False
        for anchor in ranked:
            if not _representable(det, anchor, y_uses_anchor_height):
                continue
            _, cell = encode_cell(det, anchor, None, y_uses_anchor_height)
            rows, cols = grid_shape(image_size, anchor.stride)
            if not (0 <= cell[0] < cols and 0 <= cell[1] < rows):
                continue
            a_idx = anchors[anchor.stride].index(anchor)
            slot = GridSlot(anchor.stride, cell[0], cell[1], a_idx)
            if slot in taken:
                continue
            taken.add(slot)
            out.append((det, anchor, slot))
            placed = True
            break
        if not placed:
            logger.info("detection at %s fits no free grid slot; skipped", det.center)
    return out


def encode_raw_grids(
    detections: list[Detection2D],
    image_size: tuple[int, int],
    anchors: dict[int, list[AnchorSpec]] | None = None,
    y_uses_anchor_height: bool = False,
) -> dict[int, np.ndarray]:
    """Build raw logit grids that decode back to the given detections."""
    anchors = anchors or default_anchors()
    grids = {}
    for s, group in anchors.items():
        rows, cols = grid_shape(image_size, s)
        g = np.zeros((rows, cols, len(group), CHANNELS))
        g[..., 0] = BACKGROUND_LOGIT
        grids[s] = g
    for det, anchor, slot in assign_slots(detections, image_size, anchors, y_uses_anchor_height):
        raw, _ = encode_cell(det, anchor, (slot.cell_x, slot.cell_y), y_uses_anchor_height)
        vec = np.concatenate([[raw.objectness], raw.box, raw.keypoints.ravel()])
        grids[slot.stride][slot.cell_y, slot.cell_x, slot.anchor] = vec
    return grids


def encode_target_grids(
    detections: list[Detection2D],
    image_size: tuple[int, int],
    anchors: dict[int, list[AnchorSpec]] | None = None,
    y_uses_anchor_height: bool = False,
) -> dict[int, TargetGrid]:
    """Build ground-truth target grids for the multi-task loss."""
    anchors = anchors or default_anchors()
    targets = {}
    for s, group in anchors.items():
        rows, cols = grid_shape(image_size, s)
        targets[s] = TargetGrid.empty(rows, cols, len(group))
    for det, _, slot in assign_slots(detections, image_size, anchors, y_uses_anchor_height):
        t = targets[slot.stride]
        t.objectness[slot.cell_y, slot.cell_x, slot.anchor] = 1.0
        t.boxes[slot.cell_y, slot.cell_x, slot.anchor] = det.box
        t.keypoints[slot.cell_y, slot.cell_x, slot.anchor] = det.keypoints
        t.visibility[slot.cell_y, slot.cell_x, slot.anchor] = det.visibility
    return targets


def decode_grids(
    grids: dict[int, np.ndarray],
    anchors: dict[int, list[AnchorSpec]] | None = None,
    objectness_threshold: float = 0.5,
    y_uses_anchor_height: bool = False,
) -> list[Detection2D]:
    """Decode every grid slot above the confidence threshold, grid order."""
    anchors = anchors or default_anchors()
    out = []
    for s in sorted(grids):
        scores, boxes, kps = _decode_grid_arrays(grids[s], anchors[s], y_uses_anchor_height)
        for r, c, a in np.argwhere(scores >= objectness_threshold):
            out.append(
                Detection2D(
                    center=boxes[r, c, a, :2],
                    size=boxes[r, c, a, 2:],
                    score=float(scores[r, c, a]),
                    keypoints=kps[r, c, a],
                    visibility=np.ones(kps.shape[3]),
                    slot=GridSlot(s, int(c), int(r), int(a)),
                )
            )
    return out
