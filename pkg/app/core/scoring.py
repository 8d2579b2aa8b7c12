"""Scoring module for the point-guided cascade simulator.

This module contains the fused localization score, the IoU scoring module
(ISM), the resampling scoring module (RSM) and the joint loss assembly.
Oracle scorers read ground truth; trained scorers read heatmap summaries.
"""

import logging
import math
from typing import List, Optional, Protocol, Sequence, Tuple, TypeVar

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from app.core.errors import ModelNotTrainedError
from app.core.geometry import boxes_to_array, iou, pairwise_iou
from app.learning.predictors import HeatmapPredictor
from app.models.box import BBox, ImageBounds
from app.models.detection import IsmLossType, ScoreTriple
from app.models.heatmap import GridLayout, HeatmapSet
from app.models.scene import Scene

logger = logging.getLogger(__name__)

CALIBRATION_STEEPNESS = 8.0
CALIBRATION_MIDPOINT = 0.5
ISM_FEATURE_DIM = 40

T = TypeVar("T")


def sigmoid(x: float) -> float:
    """Numerically stable logistic function."""
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def calibrated_confidence(overlap: float) -> float:
    """Logistic calibration of an IoU, 0.5 exactly at IoU 0.5."""
    return sigmoid(CALIBRATION_STEEPNESS * (overlap - CALIBRATION_MIDPOINT))


def fused_score(triple: ScoreTriple, gamma: float) -> float:
    """Fuse scores as (cls * ISM)^gamma * RSM^(1 - gamma), with 0^0 = 1.

    Args:
        triple: Classification, IoU and resampling scores
        gamma: Balance factor in [0, 1]

    Returns:
        Fused score in [0, 1]

    Raises:
        ValueError: If gamma or a score is outside [0, 1]
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    for name in ("score_cls", "score_ism", "score_rsm"):
        value = getattr(triple, name)
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {value}")
    # Python defines 0.0 ** 0.0 == 1.0.
    value = (triple.score_cls * triple.score_ism) ** gamma * triple.score_rsm ** (1.0 - gamma)
    return min(max(value, 0.0), 1.0)


class IsmFeatures(BaseModel):
    """Fixed-length summary of a box's final-stage heatmaps.

    Layout: peak value per channel (9), normalized (row, col) of each peak (18),
    channel mass (9), normalized box center and size (4).
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    vector: np.ndarray

    @model_validator(mode="after")
    def _check_vector(self) -> "IsmFeatures":
        if self.vector.shape != (ISM_FEATURE_DIM,):
            raise ValueError(f"ISM features must have {ISM_FEATURE_DIM} entries, got {self.vector.shape}")
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("ISM features must be finite")
        return self


def extract_ism_features(heatmaps: Optional[HeatmapSet], box: BBox, bounds: ImageBounds) -> IsmFeatures:
    """Summarize heatmaps and box geometry; missing heatmaps summarize as zeros."""
    vector = np.zeros(ISM_FEATURE_DIM, dtype=np.float64)
    if heatmaps is not None:
        size = heatmaps.resolution
        flat = heatmaps.values.reshape(heatmaps.n_points, -1)
        peaks_at = np.argmax(flat, axis=1)
        rows, cols = np.divmod(peaks_at, size)
        vector[0:9] = flat.max(axis=1)
        vector[9:27] = np.stack([(rows + 0.5) / size, (cols + 0.5) / size], axis=1).ravel()
        vector[27:36] = flat.sum(axis=1) / flat.shape[1]
    cx, cy = box.center
    vector[36:40] = [cx / bounds.width, cy / bounds.height, box.width / bounds.width, box.height / bounds.height]
    return IsmFeatures(vector=vector)


def pooled_features(predictor: HeatmapPredictor, scene: Scene, box: BBox, ratio: float,
                    layout: GridLayout, seed: int) -> IsmFeatures:
    """Re-pool heatmaps at a final box and summarize them for the scorers."""
    return extract_ism_features(predictor.predict(scene, box, ratio, layout, seed), box, scene.bounds)


class FeatureModel(Protocol):
    """A trained toy scorer reading feature vectors."""

    @property
    def trained(self) -> bool: ...

    def predict(self, vector: np.ndarray) -> np.ndarray: ...


def _best_match(box: BBox, scene: Scene) -> Tuple[Optional[int], float]:
    if not scene.gts:
        return None, 0.0
    overlaps = pairwise_iou(boxes_to_array([box]), boxes_to_array(scene.gt_boxes))[0]
    index = int(np.argmax(overlaps))
    return index, float(overlaps[index])


class OracleIsm:
    """IoU scorer that reads the answer from ground truth.

    With ``reference="full_extent"`` the IoU is taken against the whole object,
    as an IoU regressor trained on complete objects only would perceive it.
    """

    def __init__(self, reference: str = "visible"):
        if reference not in ("visible", "full_extent"):
            raise ValueError(f"Unknown ISM reference: {reference}")
        self.reference = reference

    def predict(self, box: BBox, scene: Scene) -> Tuple[float, float]:
        """Return (fg, bg) = (IoU with matched gt, 1 - IoU)."""
        index, overlap = _best_match(box, scene)
        if index is None or overlap <= 0.0:
            return 0.0, 1.0
        if self.reference == "full_extent":
            overlap = iou(box, scene.gts[index].full_extent)
        return overlap, 1.0 - overlap


class OracleRsm:
    """Resampled classifier evaluated on the final box, from ground truth."""

    def predict(self, box: BBox, scene: Scene) -> float:
        _, overlap = _best_match(box, scene)
        return calibrated_confidence(overlap)


def ism_predict(features: IsmFeatures, model: FeatureModel) -> Tuple[float, float]:
    """Predict (fg, bg) scores with a trained toy ISM.

    Raises:
        ModelNotTrainedError: If the model has not been trained
    """
    if not model.trained:
        raise ModelNotTrainedError("ISM model must be trained before prediction")
    fg, bg = model.predict(features.vector[None, :])[0]
    return float(fg), float(bg)


def rsm_predict(box: BBox, scene_features: IsmFeatures, model: FeatureModel) -> float:
    """Classification confidence of the final box with a trained toy RSM.

    ``scene_features`` is the heatmap summary re-pooled at the final box.

    Raises:
        ModelNotTrainedError: If the model has not been trained
    """
    if not model.trained:
        raise ModelNotTrainedError("RSM model must be trained before prediction")
    return float(model.predict(scene_features.vector[None, :])[0, 0])


def ism_loss(pred_fg, pred_bg, target_iou, loss_type: IsmLossType = IsmLossType.L2):
    """Two-target IoU regression loss, averaged over the batch.

    Works on numpy arrays and torch tensors alike.

    Args:
        pred_fg: Predicted foreground scores
        pred_bg: Predicted background scores
        target_iou: Actual IoU of each box, in [0, 1]
        loss_type: l2 (default), l1 or smooth_l1

    Returns:
        Scalar loss
    """
    if float(target_iou.min()) < 0.0 or float(target_iou.max()) > 1.0:
        raise ValueError("ISM targets must lie in [0, 1]")
    residuals = (pred_fg - target_iou, pred_bg - (1.0 - target_iou))
    loss_type = IsmLossType(loss_type)
    total = 0.0
    for r in residuals:
        if loss_type == IsmLossType.L2:
            total = total + r ** 2
        elif loss_type == IsmLossType.L1:
            total = total + abs(r)
        else:
            a = abs(r)
            total = total + 0.5 * r ** 2 * (a < 1.0) + (a - 0.5) * (a >= 1.0)
    return total.mean()


def ism_loss_gradient(pred_fg: np.ndarray, pred_bg: np.ndarray, target_iou: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of the l2 ISM loss w.r.t. (pred_fg, pred_bg)."""
    n = pred_fg.shape[0]
    return 2.0 * (pred_fg - target_iou) / n, 2.0 * (pred_bg - (1.0 - target_iou)) / n


def _check_non_negative(**components: float) -> None:
    for name, value in components.items():
        if value < 0:
            raise ValueError(f"Loss component {name} must be non-negative, got {value}")


def scoring_loss(rsm_loss: float, ism_loss_value: float, alpha_rsm: float = 1.0, alpha_ism: float = 1.0) -> float:
    """alpha_rsm * L_RSM + alpha_ism * L_ISM."""
    _check_non_negative(rsm_loss=rsm_loss, ism_loss=ism_loss_value)
    return alpha_rsm * rsm_loss + alpha_ism * ism_loss_value


def total_loss(
    l_rpn: float,
    l_cls: float,
    l_scoring: float,
    l_cmm: float,
    lambdas: Sequence[float] = (1.0, 1.0, 1.0, 1.0),
) -> float:
    """Joint loss; L_rpn and L_cls come from outside the simulator (0 when absent)."""
    _check_non_negative(l_rpn=l_rpn, l_cls=l_cls, l_scoring=l_scoring, l_cmm=l_cmm)
    if len(lambdas) != 4:
        raise ValueError(f"Expected 4 loss weights, got {len(lambdas)}")
    components = (l_rpn, l_cls, l_scoring, l_cmm)
    return float(sum(w * c for w, c in zip(lambdas, components)))


def rsm_sample(
    positives: Sequence[T],
    negatives: Sequence[T],
    seed: int,
    batch_size: int = 512,
    positive_fraction: float = 0.25,
) -> Tuple[List[T], np.ndarray]:
    """Draw an RSM training batch with at most ``positive_fraction`` positives.

    Args:
        positives: Final cascade boxes (or their features) with IoU >= 0.5
        negatives: Proposals (or their features) with IoU < 0.5
        seed: Sampling seed
        batch_size: Batch size
        positive_fraction: Upper bound on the share of positives

    Returns:
        Sampled items and their 0/1 labels
    """
    rng = np.random.default_rng(seed)
    n_pos = min(len(positives), int(batch_size * positive_fraction))
    n_neg = min(len(negatives), batch_size - n_pos)
    pos_idx = rng.choice(len(positives), size=n_pos, replace=False) if n_pos else np.zeros(0, dtype=int)
    neg_idx = rng.choice(len(negatives), size=n_neg, replace=False) if n_neg else np.zeros(0, dtype=int)
    items = [positives[i] for i in pos_idx] + [negatives[i] for i in neg_idx]
    labels = np.concatenate([np.ones(n_pos), np.zeros(n_neg)])
    return items, labels
