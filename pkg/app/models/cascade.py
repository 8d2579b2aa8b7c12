"""Cascade model module for the point-guided cascade simulator.

This module contains the stage/cascade configuration and per-stage traces.
"""

from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.models.box import BBox
from app.models.heatmap import GridLayout, HeatmapSet


class StageConfig(BaseModel):
    """Settings of one cascade stage.

    Attributes:
        mapping_ratio: Expansion ratio of the represented region (>= 1)
        iou_threshold: Training-time positive selection threshold
        loss_weight: Stage weight in the staged BCE loss
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    mapping_ratio: float = Field(ge=1.0)
    iou_threshold: float = Field(ge=0.0, le=1.0)
    loss_weight: float = Field(default=1.0, ge=0.0)


def default_stages() -> List[StageConfig]:
    """Coarse-to-fine defaults: ratios (2, 1.5, 1.25), thresholds (0.5, 0.6, 0.7), halving weights."""
    return [
        StageConfig(mapping_ratio=2.0, iou_threshold=0.5, loss_weight=1.0),
        StageConfig(mapping_ratio=1.5, iou_threshold=0.6, loss_weight=0.5),
        StageConfig(mapping_ratio=1.25, iou_threshold=0.7, loss_weight=0.25),
    ]


class CascadeConfig(BaseModel):
    """Cascade of refinement stages.

    Attributes:
        stages: Ordered stage settings, 1 to 5 of them
        grid_loss_weight: Fixed grid-branch loss weight (omega)
        layout: Grid layout shared by all stages
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    stages: List[StageConfig] = Field(default_factory=default_stages)
    grid_loss_weight: float = Field(default=1.0, ge=0.0)
    layout: GridLayout = Field(default_factory=GridLayout)

    @model_validator(mode="after")
    def _check_stages(self) -> "CascadeConfig":
        if not 1 <= len(self.stages) <= 5:
            raise ValueError(f"A cascade needs 1 to 5 stages, got {len(self.stages)}")
        ratios = [s.mapping_ratio for s in self.stages]
        if any(later > earlier for earlier, later in zip(ratios, ratios[1:])):
            raise ValueError(f"Mapping ratios must be non-increasing, got {ratios}")
        return self

    @classmethod
    def with_ratios(cls, ratios: List[float], **kwargs) -> "CascadeConfig":
        """Build a cascade that keeps the default thresholds/weights but uses the given ratios."""
        base = default_stages()
        stages = []
        for j, ratio in enumerate(ratios):
            template = base[min(j, len(base) - 1)]
            weight = 1.0 / (2 ** j)
            stages.append(StageConfig(mapping_ratio=ratio, iou_threshold=template.iou_threshold, loss_weight=weight))
        return cls(stages=stages, **kwargs)

    def truncated(self, n_stages: int) -> "CascadeConfig":
        """Return a copy that keeps only the first n stages."""
        return self.model_copy(update={"stages": list(self.stages[:n_stages])})


class StageTrace(BaseModel):
    """What one stage consumed and produced.

    Attributes:
        stage: Zero-based stage index
        input_boxes: Boxes entering the stage
        heatmaps: Predicted heatmaps per box (None for boxes passed through)
        output_boxes: Refined boxes, same count as input_boxes
        passthrough: Per-box flag set when the box could not be refined
        ious: Per-box IoU of the output vs the argmax ground truth, when known
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    stage: int
    input_boxes: List[BBox]
    heatmaps: List[Optional[HeatmapSet]]
    output_boxes: List[BBox]
    passthrough: List[bool]
    ious: Optional[List[float]] = None

    def mean_iou(self) -> Optional[float]:
        """Mean IoU over refined (non-flagged) boxes."""
        if self.ious is None:
            return None
        kept = [v for v, flagged in zip(self.ious, self.passthrough) if not flagged]
        if not kept:
            return None
        return sum(kept) / len(kept)
