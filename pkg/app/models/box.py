"""Box model module for the point-guided cascade simulator.

This module contains the data models for axis-aligned boxes and image bounds.
"""

import math
from typing import List, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, model_validator


class BBox(BaseModel):
    """Axis-aligned box in continuous image coordinates.

    Width is exclusive (x2 - x1), so zero-area boxes are representable.

    Attributes:
        x1: Left edge
        y1: Top edge
        x2: Right edge
        y2: Bottom edge
    """
    model_config = ConfigDict(frozen=True)

    x1: float
    y1: float
    x2: float
    y2: float

    @model_validator(mode="after")
    def _check_extent(self) -> "BBox":
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"Box coordinates must be finite, got {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"Box has negative extent: {coords}")
        return self

    @classmethod
    def from_xyxy(cls, coords: Sequence[float]) -> "BBox":
        """Build a box from an (x1, y1, x2, y2) sequence."""
        x1, y1, x2, y2 = (float(c) for c in coords)
        return cls(x1=x1, y1=y1, x2=x2, y2=y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def to_list(self) -> List[float]:
        return [self.x1, self.y1, self.x2, self.y2]


class ImageBounds(BaseModel):
    """Image extent in pixels.

    Attributes:
        width: Image width, positive
        height: Image height, positive
    """
    model_config = ConfigDict(frozen=True)

    width: float
    height: float

    @model_validator(mode="after")
    def _check_positive(self) -> "ImageBounds":
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"Image bounds must be positive, got {self.width}x{self.height}")
        return self

    def contains(self, box: BBox) -> bool:
        """Check whether a box lies inside the image."""
        return box.x1 >= 0 and box.y1 >= 0 and box.x2 <= self.width and box.y2 <= self.height
