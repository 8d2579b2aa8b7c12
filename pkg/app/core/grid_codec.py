"""Grid Codec module for the point-guided cascade simulator.

This module maps between image coordinates and heatmap cells over the
expanded represented region of a proposal, encodes ground-truth heatmaps,
decodes predicted points and fuses them into boxes.
"""

import math
from typing import Tuple

import numpy as np

from app.core.errors import UndecodableBoxError
from app.core.geometry import expand
from app.models.box import BBox
from app.models.heatmap import (
    BOTTOM_POINTS,
    LEFT_POINTS,
    RIGHT_POINTS,
    TOP_POINTS,
    DecodedPoints,
    GridLayout,
    HeatmapSet,
)

Point = Tuple[float, float]


def represented_region(proposal: BBox, ratio: float) -> BBox:
    """Return the region a heatmap covers; rejects zero-area proposals."""
    if proposal.width <= 0 or proposal.height <= 0:
        raise ValueError(f"Proposal must have positive area, got {proposal.to_list()}")
    return expand(proposal, ratio)


def points_to_cells(points: np.ndarray, proposal: BBox, ratio: float, resolution: int) -> np.ndarray:
    """Vectorized image -> continuous cell mapping for an (n, 2) array of (x, y)."""
    region = represented_region(proposal, ratio)
    origin = np.array([region.x1, region.y1])
    extent = np.array([region.width, region.height])
    return (np.asarray(points, dtype=np.float64) - origin) / extent * resolution


def image_to_cell(point: Point, proposal: BBox, ratio: float, resolution: int) -> Point:
    """Map an image point to continuous cell coordinates (u along x, v along y).

    The result may fall outside [0, S] when the point lies outside the region.
    """
    u, v = points_to_cells(np.array([point]), proposal, ratio, resolution)[0]
    return float(u), float(v)


def cell_to_image(cell: Point, proposal: BBox, ratio: float, resolution: int) -> Point:
    """Exact inverse of ``image_to_cell`` on continuous coordinates."""
    region = represented_region(proposal, ratio)
    u, v = cell
    return region.x1 + u / resolution * region.width, region.y1 + v / resolution * region.height


def in_region(u: float, v: float, resolution: int) -> bool:
    """Check whether continuous cell coordinates lie inside the closed map [0, S]^2."""
    return 0.0 <= u <= resolution and 0.0 <= v <= resolution


def cell_index(c: float, resolution: int) -> int:
    """Floor a continuous in-region coordinate to its cell; the far edge S belongs to cell S - 1."""
    return min(int(math.floor(c)), resolution - 1)


def encode_target(gt_box: BBox, proposal: BBox, ratio: float, layout: GridLayout) -> HeatmapSet:
    """Convert a matched ground-truth box into target heatmaps.

    Each in-region grid point labels its cell and the Chebyshev-radius-1
    neighbours 1.0 (clipped to the map). Points outside the represented
    region leave a zero channel flagged out-of-region.

    Args:
        gt_box: Matched ground-truth box
        proposal: Box whose expansion defines the region
        ratio: Mapping ratio
        layout: Grid layout

    Returns:
        Target HeatmapSet
    """
    size = layout.resolution
    values = np.zeros((layout.n_points, size, size), dtype=np.float64)
    flags = np.zeros(layout.n_points, dtype=bool)
    cells = points_to_cells(layout.grid_points(gt_box), proposal, ratio, size)
    for k, (u, v) in enumerate(cells):
        if not in_region(u, v, size):
            flags[k] = True
            continue
        row, col = cell_index(v, size), cell_index(u, size)
        values[k, max(row - 1, 0):row + 2, max(col - 1, 0):col + 2] = 1.0
    return HeatmapSet(values=values, proposal=proposal, ratio=ratio, out_of_region=flags)


def decode_points(heatmaps: HeatmapSet) -> DecodedPoints:
    """Decode one point per channel.

    The argmax cell (ties -> smallest row-major index) anchors each point; the
    location is the centroid of above-floor mass in the 3x3 window around it,
    which is the argmax cell center for isolated peaks. A flat channel
    carries no evidence and decodes with confidence 0.

    Args:
        heatmaps: Predicted or target heatmaps

    Returns:
        DecodedPoints in image coordinates
    """
    size = heatmaps.resolution
    n_points = heatmaps.n_points
    locations = np.zeros((n_points, 2), dtype=np.float64)
    confidences = np.zeros(n_points, dtype=np.float64)
    cells = []
    for k in range(n_points):
        channel = heatmaps.values[k]
        flat_index = int(np.argmax(channel))
        row, col = divmod(flat_index, size)
        cells.append((row, col))
        peak = float(channel[row, col])
        floor = float(channel.min())
        u, v = col + 0.5, row + 0.5
        if peak > floor:
            confidences[k] = peak
            r0, c0 = max(row - 1, 0), max(col - 1, 0)
            window = channel[r0:row + 2, c0:col + 2] - floor
            total = window.sum()
            rows = np.arange(r0, r0 + window.shape[0]) + 0.5
            cols = np.arange(c0, c0 + window.shape[1]) + 0.5
            v = float((window.sum(axis=1) * rows).sum() / total)
            u = float((window.sum(axis=0) * cols).sum() / total)
        locations[k] = cell_to_image((u, v), heatmaps.proposal, heatmaps.ratio, size)
    return DecodedPoints(locations=locations, confidences=confidences, cells=cells)


def _weighted_edge(points: DecodedPoints, group: Tuple[int, ...], axis: int, side: str) -> float:
    weights = points.confidences[list(group)]
    total = float(weights.sum())
    if total <= 0:
        raise UndecodableBoxError(f"undecodable box: {side} points carry no confidence")
    return float((weights * points.locations[list(group), axis]).sum() / total)


def points_to_box(points: DecodedPoints, layout: GridLayout) -> BBox:
    """Fuse decoded points into a box.

    Each edge is the confidence-weighted mean of the coordinate of its three
    side points.

    Raises:
        UndecodableBoxError: If any side group has zero total confidence
    """
    if points.locations.shape[0] != layout.n_points:
        raise ValueError(f"Expected {layout.n_points} points, got {points.locations.shape[0]}")
    x1 = _weighted_edge(points, LEFT_POINTS, 0, "left")
    x2 = _weighted_edge(points, RIGHT_POINTS, 0, "right")
    y1 = _weighted_edge(points, TOP_POINTS, 1, "top")
    y2 = _weighted_edge(points, BOTTOM_POINTS, 1, "bottom")
    x1, x2 = min(x1, x2), max(x1, x2)
    y1, y2 = min(y1, y2), max(y1, y2)
    return BBox(x1=x1, y1=y1, x2=x2, y2=y2)
