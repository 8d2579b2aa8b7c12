"""Heatmap model module for the point-guided cascade simulator.

This module contains the grid layout and the heatmap/point containers passed
between predictors, the grid codec and the cascade.
"""

from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from app.models.box import BBox

# Row-major 3x3 grid over a box: index = 3 * row + col.
LEFT_POINTS: Tuple[int, ...] = (0, 3, 6)
RIGHT_POINTS: Tuple[int, ...] = (2, 5, 8)
TOP_POINTS: Tuple[int, ...] = (0, 1, 2)
BOTTOM_POINTS: Tuple[int, ...] = (6, 7, 8)


class GridLayout(BaseModel):
    """Grid point arrangement and heatmap resolution.

    Attributes:
        n_points: Number of grid points; only the 3x3 layout is supported
        resolution: Heatmap side length S in cells
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_points: int = 9
    resolution: int = 28

    @model_validator(mode="after")
    def _check_layout(self) -> "GridLayout":
        if self.n_points != 9:
            raise ValueError(f"Only the 9-point grid layout is supported, got {self.n_points}")
        if self.resolution < 4:
            raise ValueError(f"Heatmap resolution must be >= 4, got {self.resolution}")
        return self

    def grid_points(self, box: BBox) -> np.ndarray:
        """Return the (9, 2) image coordinates of the grid points of a box."""
        fractions = np.array([0.0, 0.5, 1.0])
        xs = box.x1 + fractions * box.width
        ys = box.y1 + fractions * box.height
        return np.array([(xs[c], ys[r]) for r in range(3) for c in range(3)], dtype=np.float64)


class HeatmapSet(BaseModel):
    """Per-point S x S probability maps over an expanded represented region.

    Attributes:
        values: Array of shape (n_points, S, S), indexed [point, row, col]
        proposal: Box whose expansion defines the represented region
        ratio: Mapping ratio used for the expansion
        out_of_region: Boolean flag per channel; True channels are masked out of losses
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    values: np.ndarray
    proposal: BBox
    ratio: float
    out_of_region: np.ndarray

    @model_validator(mode="after")
    def _check_values(self) -> "HeatmapSet":
        if self.values.ndim != 3 or self.values.shape[1] != self.values.shape[2]:
            raise ValueError(f"Heatmap values must have shape (n, S, S), got {self.values.shape}")
        if self.out_of_region.shape != (self.values.shape[0],):
            raise ValueError("out_of_region must hold one flag per channel")
        if not np.all(np.isfinite(self.values)) or self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValueError("Heatmap values must be finite and within [0, 1]")
        return self

    @property
    def resolution(self) -> int:
        return int(self.values.shape[1])

    @property
    def n_points(self) -> int:
        return int(self.values.shape[0])


class DecodedPoints(BaseModel):
    """Decoded grid points in image coordinates.

    Attributes:
        locations: Array of shape (n_points, 2) with (x, y) per point
        confidences: Array of shape (n_points,) with values in [0, 1]
        cells: Argmax (row, col) per point
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    locations: np.ndarray
    confidences: np.ndarray
    cells: List[Tuple[int, int]]
