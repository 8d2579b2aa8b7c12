"""Geometry module for the point-guided cascade simulator.

This module contains axis-aligned box algebra: IoU, center-preserving
expansion, clipping, plus vectorized helpers used by matching and NMS.
"""

from typing import Sequence

import numpy as np

from app.models.box import BBox, ImageBounds


def iou(a: BBox, b: BBox) -> float:
    """Calculate intersection over union of two boxes.

    Args:
        a: First box
        b: Second box

    Returns:
        IoU in [0, 1]; 0 when either box has zero area
    """
    inter_w = min(a.x2, b.x2) - max(a.x1, b.x1)
    inter_h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if inter_w <= 0 or inter_h <= 0:
        return 0.0
    inter = inter_w * inter_h
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


def expand(box: BBox, ratio: float) -> BBox:
    """Scale a box about its center; the result is not clipped.

    Args:
        box: Box to expand
        ratio: Scale factor, at least 1

    Returns:
        Expanded box with the same center

    Raises:
        ValueError: If ratio is below 1
    """
    if not ratio >= 1.0:
        raise ValueError(f"Mapping ratio must be >= 1, got {ratio}")
    cx, cy = box.center
    half_w = box.width * ratio / 2.0
    half_h = box.height * ratio / 2.0
    return BBox(x1=cx - half_w, y1=cy - half_h, x2=cx + half_w, y2=cy + half_h)


def clip(box: BBox, bounds: ImageBounds) -> BBox:
    """Clamp a box to the image; a box fully outside collapses onto the nearest border."""
    return BBox(
        x1=min(max(box.x1, 0.0), bounds.width),
        y1=min(max(box.y1, 0.0), bounds.height),
        x2=min(max(box.x2, 0.0), bounds.width),
        y2=min(max(box.y2, 0.0), bounds.height),
    )


def boxes_to_array(boxes: Sequence[BBox]) -> np.ndarray:
    """Stack boxes into an (n, 4) float64 array."""
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([b.to_list() for b in boxes], dtype=np.float64)


def box_area(xyxy: np.ndarray) -> np.ndarray:
    """Return the areas of boxes given as an (n, 4) array."""
    return (xyxy[:, 2] - xyxy[:, 0]) * (xyxy[:, 3] - xyxy[:, 1])


def pairwise_iou(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Return the (n, m) IoU matrix between two box arrays.

    Pairs whose union is zero score 0, matching ``iou``.
    """
    if boxes_a.shape[0] == 0 or boxes_b.shape[0] == 0:
        return np.zeros((boxes_a.shape[0], boxes_b.shape[0]), dtype=np.float64)
    area_a = box_area(boxes_a)[:, None]
    area_b = box_area(boxes_b)[None, :]
    top_left = np.maximum(boxes_a[:, None, :2], boxes_b[None, :, :2])
    bottom_right = np.minimum(boxes_a[:, None, 2:], boxes_b[None, :, 2:])
    inter = np.prod(np.clip(bottom_right - top_left, a_min=0.0, a_max=None), axis=2)
    union = area_a + area_b - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return np.minimum(out, 1.0)


def max_iou(box: BBox, others: Sequence[BBox]) -> float:
    """Best IoU of a box against a list; 0 for an empty list."""
    if not others:
        return 0.0
    return float(pairwise_iou(boxes_to_array([box]), boxes_to_array(others)).max())
