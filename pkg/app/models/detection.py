"""Detection model module for the point-guided cascade simulator.

This module contains score containers, scoring settings, detections and
evaluation results.
"""

from enum import Enum
from typing import Dict, List, Tuple

from pydantic import BaseModel, ConfigDict, Field

from app.models.box import BBox


class IsmLossType(str, Enum):
    """Regression loss of the IoU scorer."""
    L2 = "l2"
    L1 = "l1"
    SMOOTH_L1 = "smooth_l1"


class ScoreTriple(BaseModel):
    """Classification, IoU and resampling scores of one detection."""
    model_config = ConfigDict(frozen=True)

    score_cls: float = Field(ge=0.0, le=1.0)
    score_ism: float = Field(default=1.0, ge=0.0, le=1.0)
    score_rsm: float = Field(default=1.0, ge=0.0, le=1.0)


class ScoringConfig(BaseModel):
    """Fused-score and loss weights.

    Attributes:
        gamma: Balance between cls*ISM and RSM in the fused score
        alpha_rsm: Weight of the RSM loss inside the scoring loss
        alpha_ism: Weight of the ISM loss inside the scoring loss
        lambdas: Weights of (rpn, cls, scoring, cmm) in the total loss
        ism_loss: Regression loss of the IoU scorer
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    gamma: float = Field(default=0.8, ge=0.0, le=1.0)
    alpha_rsm: float = Field(default=1.0, ge=0.0)
    alpha_ism: float = Field(default=1.0, ge=0.0)
    lambdas: Tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    ism_loss: IsmLossType = IsmLossType.L2


class Detection(BaseModel):
    """Final detection with its score breakdown.

    Attributes:
        box: Detected box
        scores: Score triple
        fused: Ranking score in [0, 1]
        class_id: Predicted class
        scene_id: Scene the detection belongs to
        index: Scene-local index, used to break score ties
    """
    model_config = ConfigDict(frozen=True)

    box: BBox
    scores: ScoreTriple
    fused: float = Field(ge=0.0, le=1.0)
    class_id: int = 0
    scene_id: int = 0
    index: int = 0


class EvalResult(BaseModel):
    """COCO-style metrics.

    Attributes:
        ap: Mean AP over IoU 0.50:0.05:0.95
        ap50: AP at IoU 0.5
        ap75: AP at IoU 0.75
        ap_at: AP per evaluated threshold, keyed "0.50", "0.55", ...
        ap_small: AP over 0.50:0.95 for small ground truth; NaN without any
            small ground truth
        ap_medium: Same for medium
        ap_large: Same for large
        pr_curves: Per threshold, precision sampled at the 101 recall points
    """
    ap: float
    ap50: float
    ap75: float
    ap_at: Dict[str, float]
    ap_small: float
    ap_medium: float
    ap_large: float
    pr_curves: Dict[str, List[float]] = {}

    def metric_rows(self) -> List[Tuple[str, float]]:
        """Flatten headline metrics into (name, value) rows."""
        rows = [
            ("AP", self.ap),
            ("AP50", self.ap50),
            ("AP75", self.ap75),
            ("AP_S", self.ap_small),
            ("AP_M", self.ap_medium),
            ("AP_L", self.ap_large),
        ]
        rows.extend((f"AP@{key}", value) for key, value in sorted(self.ap_at.items()))
        return rows
