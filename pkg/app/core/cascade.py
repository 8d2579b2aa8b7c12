"""Cascade module for the point-guided cascade simulator.

This module contains the stage-wise refinement of the box stream, the
training-time positive selection and the staged BCE heatmap loss.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import ExperimentError, UndecodableBoxError
from app.core.geometry import boxes_to_array, clip, pairwise_iou
from app.core.grid_codec import decode_points, points_to_box
from app.learning.predictors import HeatmapPredictor
from app.models.box import BBox
from app.models.cascade import CascadeConfig, StageConfig, StageTrace
from app.models.heatmap import GridLayout, HeatmapSet
from app.models.scene import Scene
from app.utils.seeding import derive_seed

logger = logging.getLogger(__name__)

BCE_EPS = 1e-6

_StageResult = Tuple[BBox, Optional[HeatmapSet], bool]


def select_positives(boxes: Sequence[BBox], gts: Sequence[BBox], iou_threshold: float) -> List[Tuple[int, int]]:
    """Pick training positives for a stage.

    Args:
        boxes: Boxes entering the stage
        gts: Ground-truth boxes
        iou_threshold: Minimum IoU with the best ground truth, in [0, 1]

    Returns:
        (box index, matched gt index) pairs, in box order; ties go to the lowest gt index
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    if not boxes or not gts:
        return []
    overlaps = pairwise_iou(boxes_to_array(boxes), boxes_to_array(gts))
    matched = np.argmax(overlaps, axis=1)
    best = overlaps[np.arange(len(boxes)), matched]
    # Threshold 0 still requires an actual overlap.
    keep = (best >= iou_threshold) & (best > 0.0)
    return [(int(i), int(matched[i])) for i in np.flatnonzero(keep)]


def _refine_one(
    predictor: HeatmapPredictor,
    scene: Scene,
    box: BBox,
    ratio: float,
    layout: GridLayout,
    seed: int,
    stage_index: int,
    box_index: int,
) -> _StageResult:
    try:
        heatmaps = predictor.predict(scene, box, ratio, layout, seed)
        refined = clip(points_to_box(decode_points(heatmaps), layout), scene.bounds)
    except UndecodableBoxError as e:
        logger.debug(f"Scene {scene.id} stage {stage_index} box {box_index}: {e}; passed through")
        return box, None, True
    except Exception as e:  # noqa: BLE001
        logger.warning(f"Scene {scene.id} stage {stage_index} box {box_index}: predictor failed ({e!r}); passed through")
        return box, None, True
    if refined.area <= 0:
        logger.debug(f"Scene {scene.id} stage {stage_index} box {box_index}: collapsed to zero area; passed through")
        return box, None, True
    return refined, heatmaps, False


def run_stage(
    cfg: StageConfig,
    boxes: Sequence[BBox],
    predictor: HeatmapPredictor,
    scene: Scene,
    layout: GridLayout,
    stage_index: int = 0,
    seed: int = 0,
    skip: Optional[Sequence[bool]] = None,
    workers: int = 1,
) -> StageTrace:
    """Refine every box once at the stage's mapping ratio.

    Boxes that cannot be decoded, or whose prediction fails, pass through
    unchanged and are flagged. Boxes marked in ``skip`` are carried as-is.

    Args:
        cfg: Stage settings
        boxes: Boxes entering the stage
        predictor: Heatmap predictor
        scene: Scene the boxes belong to
        layout: Grid layout
        stage_index: Zero-based stage index, mixed into per-box seeds
        seed: Run seed
        skip: Per-box flags of boxes already passed through
        workers: Thread count; results do not depend on it

    Returns:
        StageTrace with one output box per input box
    """
    skip = list(skip) if skip is not None else [False] * len(boxes)
    if len(skip) != len(boxes):
        raise ValueError(f"Got {len(skip)} skip flags for {len(boxes)} boxes")

    def work(index: int) -> _StageResult:
        if skip[index]:
            return boxes[index], None, True
        box_seed = derive_seed(seed, scene.id, stage_index, index)
        return _refine_one(predictor, scene, boxes[index], cfg.mapping_ratio, layout, box_seed, stage_index, index)

    if workers > 1 and len(boxes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, range(len(boxes))))
    else:
        results = [work(i) for i in range(len(boxes))]

    outputs = [r[0] for r in results]
    ious = None
    if scene.gts and outputs:
        ious = pairwise_iou(boxes_to_array(outputs), boxes_to_array(scene.gt_boxes)).max(axis=1).tolist()
    trace = StageTrace(
        stage=stage_index,
        input_boxes=list(boxes),
        heatmaps=[r[1] for r in results],
        output_boxes=outputs,
        passthrough=[r[2] for r in results],
        ious=ious,
    )
    logger.debug(
        f"Scene {scene.id} stage {stage_index} (ratio {cfg.mapping_ratio}): "
        f"{len(outputs)} boxes, {sum(trace.passthrough)} passed through"
    )
    return trace


def run_cascade(
    cfg: CascadeConfig,
    proposals: Sequence[BBox],
    predictor: HeatmapPredictor,
    scene: Scene,
    seed: int = 0,
    workers: int = 1,
) -> Tuple[List[BBox], List[StageTrace]]:
    """Run every stage in order; stage j + 1 consumes stage j's boxes.

    All boxes advance at inference. A box flagged in one stage stays
    unchanged and flagged in every later stage.

    Returns:
        Final boxes and one trace per stage

    Raises:
        ExperimentError: Naming the scene and the stage that failed
    """
    boxes = list(proposals)
    flags = [False] * len(boxes)
    traces = []
    for j, stage in enumerate(cfg.stages):
        try:
            trace = run_stage(stage, boxes, predictor, scene, cfg.layout, j, seed, flags, workers)
        except Exception as e:
            raise ExperimentError(f"cascade stage failed: {e}", scene_id=scene.id, stage=j) from e
        traces.append(trace)
        boxes = trace.output_boxes
        flags = trace.passthrough
    return boxes, traces


def _bce_terms(predicted: HeatmapSet, target: HeatmapSet) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if predicted.values.shape != target.values.shape:
        raise ValueError(f"Predicted shape {predicted.values.shape} does not match target {target.values.shape}")
    p = np.clip(predicted.values, BCE_EPS, 1.0 - BCE_EPS)
    t = target.values
    mask = np.broadcast_to(~target.out_of_region[:, None, None], t.shape)
    return p, t, mask


def _check_stages(predicted: Sequence[Sequence[HeatmapSet]], targets: Sequence[Sequence[HeatmapSet]],
                  cfg: CascadeConfig) -> None:
    if len(predicted) != len(targets) or len(predicted) > len(cfg.stages):
        raise ValueError(
            f"Got {len(predicted)} predicted and {len(targets)} target stages for {len(cfg.stages)} configured"
        )
    for j, (preds, tgts) in enumerate(zip(predicted, targets)):
        if len(preds) != len(tgts):
            raise ValueError(f"Stage {j}: {len(preds)} predictions vs {len(tgts)} targets")


def cmm_loss(
    predicted: Sequence[Sequence[HeatmapSet]],
    targets: Sequence[Sequence[HeatmapSet]],
    cfg: CascadeConfig,
) -> float:
    """Staged BCE loss: sum over stages of beta_j * omega * mean BCE over unmasked cells.

    Args:
        predicted: Per stage, predicted heatmaps of the selected boxes
        targets: Per stage, matching target heatmaps (out-of-region channels masked)
        cfg: Cascade settings supplying beta_j and omega

    Returns:
        Non-negative scalar loss
    """
    _check_stages(predicted, targets, cfg)
    total = 0.0
    for stage, preds, tgts in zip(cfg.stages, predicted, targets):
        loss_sum = 0.0
        count = 0
        for pred, tgt in zip(preds, tgts):
            p, t, mask = _bce_terms(pred, tgt)
            bce = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
            loss_sum += float(bce[mask].sum())
            count += int(mask.sum())
        if count:
            total += stage.loss_weight * cfg.grid_loss_weight * loss_sum / count
    return total


def cmm_loss_gradient(
    predicted: Sequence[Sequence[HeatmapSet]],
    targets: Sequence[Sequence[HeatmapSet]],
    cfg: CascadeConfig,
) -> List[List[np.ndarray]]:
    """Analytic gradient of ``cmm_loss`` w.r.t. every predicted heatmap value.

    Masked cells and cells clamped by the numerical guard get zero gradient.
    """
    _check_stages(predicted, targets, cfg)
    grads: List[List[np.ndarray]] = []
    for stage, preds, tgts in zip(cfg.stages, predicted, targets):
        count = 0
        terms = []
        for pred, tgt in zip(preds, tgts):
            p, t, mask = _bce_terms(pred, tgt)
            count += int(mask.sum())
            inside = (pred.values > BCE_EPS) & (pred.values < 1.0 - BCE_EPS)
            terms.append((-t / p + (1.0 - t) / (1.0 - p)) * (mask & inside))
        scale = stage.loss_weight * cfg.grid_loss_weight / count if count else 0.0
        grads.append([g * scale for g in terms])
    return grads
