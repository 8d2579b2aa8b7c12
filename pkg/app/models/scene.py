"""Scene model module for the point-guided cascade simulator.

This module contains the synthetic world: ground-truth objects, scenes and
the parameters of the proposal generator.
"""

from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.models.box import BBox, ImageBounds


class GroundTruth(BaseModel):
    """Ground-truth object as visible in the image.

    Attributes:
        box: Visible (clipped) box
        class_id: Object class
        truncated: Whether the object extends past the image border
        full_extent: Pre-clip box; equals box for complete objects
    """
    model_config = ConfigDict(frozen=True)

    box: BBox
    class_id: int = 0
    truncated: bool = False
    full_extent: BBox

    @model_validator(mode="before")
    @classmethod
    def _default_extent(cls, data):
        if isinstance(data, dict) and data.get("full_extent") is None:
            data = {**data, "full_extent": data.get("box")}
        return data

    @model_validator(mode="after")
    def _check_truncation(self) -> "GroundTruth":
        if self.truncated != (self.full_extent != self.box):
            raise ValueError("truncated must be set exactly when full_extent differs from box")
        return self


class Scene(BaseModel):
    """Synthetic image: bounds and ground-truth objects, no pixels.

    Attributes:
        id: Scene identifier, unique within a corpus
        bounds: Image extent
        gts: Ground-truth objects
    """
    model_config = ConfigDict(frozen=True)

    id: int
    bounds: ImageBounds
    gts: List[GroundTruth] = []

    @model_validator(mode="after")
    def _check_gts_inside(self) -> "Scene":
        for gt in self.gts:
            if not self.bounds.contains(gt.box):
                raise ValueError(f"Scene {self.id}: ground truth {gt.box.to_list()} leaves the image")
        return self

    @property
    def gt_boxes(self) -> List[BBox]:
        return [gt.box for gt in self.gts]


class SizeMix(BaseModel):
    """Relative frequency of small/medium/large objects (COCO area bins)."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    small: float = Field(default=0.3, ge=0.0)
    medium: float = Field(default=0.4, ge=0.0)
    large: float = Field(default=0.3, ge=0.0)

    @model_validator(mode="after")
    def _check_total(self) -> "SizeMix":
        if self.small + self.medium + self.large <= 0:
            raise ValueError("size_mix needs at least one positive weight")
        return self

    def probabilities(self) -> List[float]:
        total = self.small + self.medium + self.large
        return [self.small / total, self.medium / total, self.large / total]


class ProposalParams(BaseModel):
    """RPN stand-in settings.

    Attributes:
        jitter_sigma: Gaussian jitter of center and log-size, as a fraction of gt size
        scale_quantization: Snap factor for sizes (anchor scales); None disables snapping
        per_object: Jittered proposals per ground truth (K)
        n_background: Background proposals per scene, IoU < 0.3 with every gt
        seed: Base seed; None lets the caller derive one
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    jitter_sigma: float = Field(default=0.1, ge=0.0)
    scale_quantization: Optional[float] = Field(default=None, gt=1.0)
    per_object: int = Field(default=10, ge=0)
    n_background: int = Field(default=20, ge=0)
    seed: Optional[int] = None


class GroundTruthRecord(BaseModel):
    """A ground truth as stored in a corpus file; boxes are [x1, y1, x2, y2]."""
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    box: List[float] = Field(min_length=4, max_length=4)
    class_id: int = Field(default=0, alias="class")
    truncated: bool
    full_extent: List[float] = Field(min_length=4, max_length=4)

    @classmethod
    def from_ground_truth(cls, gt: GroundTruth) -> "GroundTruthRecord":
        return cls(box=gt.box.to_list(), class_id=gt.class_id, truncated=gt.truncated,
                   full_extent=gt.full_extent.to_list())

    def to_ground_truth(self) -> GroundTruth:
        return GroundTruth(box=BBox.from_xyxy(self.box), class_id=self.class_id, truncated=self.truncated,
                           full_extent=BBox.from_xyxy(self.full_extent))


class SceneRecord(BaseModel):
    """A scene as stored in a corpus file."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    id: int
    width: float
    height: float
    gts: List[GroundTruthRecord] = []

    @classmethod
    def from_scene(cls, scene: Scene) -> "SceneRecord":
        return cls(id=scene.id, width=scene.bounds.width, height=scene.bounds.height,
                   gts=[GroundTruthRecord.from_ground_truth(gt) for gt in scene.gts])

    def to_scene(self) -> Scene:
        return Scene(id=self.id, bounds=ImageBounds(width=self.width, height=self.height),
                     gts=[gt.to_ground_truth() for gt in self.gts])


class CorpusHeader(BaseModel):
    """Just the version of a corpus file, read before the scenes."""
    model_config = ConfigDict(frozen=True)

    version: int


class SceneCorpus(BaseModel):
    """Versioned corpus file: ``{"version": 1, "scenes": [...]}``."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    version: int
    scenes: List[SceneRecord]
