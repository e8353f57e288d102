"""Training patch sampling.

A positive patch is a square window around a GT box that keeps the whole
vehicle inside; a negative patch is a square window overlapping no GT box
(IoU and per-vehicle coverage both under the negative limit).
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np

from dave import settings
from dave.boxes import as_boxes, coverage, iou_matrix

Patch = Tuple[float, float, float]  # x, y, side


def _place(lo: float, hi: float, want: float, img_lo: float, img_hi: float) -> float:
    """Clamp ``want`` into [lo, hi], preferring positions inside [img_lo, img_hi]."""
    a, b = max(lo, img_lo), min(hi, img_hi)
    if a <= b:
        return float(np.clip(want, a, b))
    return float(np.clip(want, lo, hi))


def positive_patch(
    box: Sequence[float],
    width: int,
    height: int,
    rng: np.random.Generator,
    scale_range: Tuple[float, float] = settings.PATCH_SCALE_RANGE,
    jitter: float = settings.PATCH_CENTER_JITTER,
) -> Patch:
    """Square window of side uniform in ``scale_range`` x the longer GT side.

    The center is jittered by up to ``jitter`` of the side, then moved so the
    box stays fully inside and, when possible, the window stays in the image.
    """
    x, y, w, h = (float(v) for v in box)
    side = max(w, h) * float(rng.uniform(*scale_range))
    cx = x + w / 2 + float(rng.uniform(-jitter, jitter)) * side
    cy = y + h / 2 + float(rng.uniform(-jitter, jitter)) * side
    px = _place(x + w - side, x, cx - side / 2, 0.0, width - side)
    py = _place(y + h - side, y, cy - side / 2, 0.0, height - side)
    return px, py, side


def loc_target(box: Sequence[float], patch: Patch) -> np.ndarray:
    """GT box in patch-normalized coordinates, clipped to [0, 1]."""
    x, y, w, h = (float(v) for v in box)
    px, py, side = patch
    loc = np.array([(x - px) / side, (y - py) / side, w / side, h / side])
    return np.clip(loc, 0.0, 1.0)


def negative_patch(
    boxes,
    width: int,
    height: int,
    rng: np.random.Generator,
    min_side: float = 40.0,
    max_iou: float = settings.NEGATIVE_MAX_IOU,
    tries: int = 30,
) -> Optional[Patch]:
    """A background window, or None when ``tries`` draws all hit a vehicle."""
    gts = as_boxes(boxes)
    limit = float(min(width, height))
    lo = min(min_side, limit)
    for _ in range(tries):
        side = float(rng.uniform(lo, limit))
        px = float(rng.uniform(0.0, width - side))
        py = float(rng.uniform(0.0, height - side))
        if len(gts) == 0:
            return px, py, side
        window = [(px, py, side, side)]
        if iou_matrix(window, gts).max() < max_iou and coverage(window, gts).max() < max_iou:
            return px, py, side
    return None


def patch_box(patch: Patch) -> Tuple[float, float, float, float]:
    px, py, side = patch
    return px, py, side, side
