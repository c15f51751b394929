"""Rasterization of 2D segments into binary masks.

Masks are boolean arrays indexed [row, col] = [v, u]. A pixel is
foreground when its center lies within half the stroke width of any
segment.
"""

from __future__ import annotations

import math

import numpy as np


def rasterize_segments(
    segments: np.ndarray,
    width: int,
    height: int,
    stroke_width: float = 3.0,
) -> np.ndarray:
    """Draw segments ((N, 2, 2) array of (u, v) endpoint pairs) as a mask.

    Each segment only touches pixels inside its padded bounding box, so
    cost scales with drawn area rather than image area.
    """
    mask = np.zeros((height, width), dtype=bool)
    segs = np.asarray(segments, dtype=float).reshape(-1, 2, 2)
    radius = stroke_width / 2.0
    for (u0, v0), (u1, v1) in segs:
        if not np.all(np.isfinite([u0, v0, u1, v1])):
            continue
        lo_u = max(0, int(math.floor(min(u0, u1) - radius)))
        hi_u = min(width - 1, int(math.ceil(max(u0, u1) + radius)))
        lo_v = max(0, int(math.floor(min(v0, v1) - radius)))
        hi_v = min(height - 1, int(math.ceil(max(v0, v1) + radius)))
        if lo_u > hi_u or lo_v > hi_v:
            continue
        uu, vv = np.meshgrid(
            np.arange(lo_u, hi_u + 1), np.arange(lo_v, hi_v + 1), indexing="xy"
        )
        d2 = _point_segment_dist2(uu, vv, u0, v0, u1, v1)
        mask[lo_v : hi_v + 1, lo_u : hi_u + 1] |= d2 <= radius * radius
    return mask


def _point_segment_dist2(uu, vv, u0, v0, u1, v1):
    du, dv = u1 - u0, v1 - v0
    len2 = du * du + dv * dv
    if len2 <= 1e-18:
        return (uu - u0) ** 2 + (vv - v0) ** 2
    t = np.clip(((uu - u0) * du + (vv - v0) * dv) / len2, 0.0, 1.0)
    pu = u0 + t * du
    pv = v0 + t * dv
    return (uu - pu) ** 2 + (vv - pv) ** 2


def point_segment_distance(point, a, b) -> float:
    """Euclidean distance from a 2D point to segment [a, b]."""
    p = np.asarray(point, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d2 = _point_segment_dist2(
        np.array([p[0]]), np.array([p[1]]), a[0], a[1], b[0], b[1]
    )
    return float(np.sqrt(d2[0]))
