"""Evaluator module for the point-guided cascade simulator.

This module contains greedy NMS, detection to ground-truth matching and
COCO-style average precision over IoU thresholds and object scales.
"""

import logging
import math
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from app.core.errors import UnknownSceneError
from app.core.geometry import box_area, boxes_to_array, pairwise_iou
from app.models.box import BBox
from app.models.detection import Detection, EvalResult

logger = logging.getLogger(__name__)

RECALL_POINTS = np.arange(101) / 100.0
COCO_THRESHOLDS: Tuple[float, ...] = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
DEFAULT_SCALE_BINS: Tuple[float, float] = (32.0 ** 2, 96.0 ** 2)


def _ranked(dets: Sequence[Detection]) -> List[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].fused, dets[i].index))


def nms(dets: Sequence[Detection], iou_threshold: float) -> List[Detection]:
    """Greedy non-maximum suppression.

    Detections are visited by descending fused score (ties -> lower index);
    any detection with IoU > threshold against a kept one is dropped.

    Args:
        dets: Detections of one scene
        iou_threshold: Suppression threshold in [0, 1]

    Returns:
        Kept detections in keep order
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    if not dets:
        return []
    order = np.array(_ranked(dets))
    boxes = boxes_to_array([d.box for d in dets])
    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(int(i))
        overlaps = pairwise_iou(boxes[i:i + 1], boxes[order[1:]])[0]
        order = order[1:][overlaps <= iou_threshold]
    return [dets[i] for i in keep]


def cap_rois(dets: Sequence[Detection], max_count: int) -> List[Detection]:
    """Keep the max_count highest-scoring detections, in rank order."""
    if max_count < 0:
        raise ValueError(f"max_count must be >= 0, got {max_count}")
    return [dets[i] for i in _ranked(dets)[:max_count]]


class MatchResult(BaseModel):
    """Greedy matching outcome for ranked detections.

    Attributes:
        tp: Per detection, True for a true positive
        ignored: Per detection, True when it does not count (scale filtering)
        matched_gt: Per detection, matched gt index or -1
        n_unmatched_gt: Counted ground truths left unmatched
    """
    model_config = ConfigDict(frozen=True)

    tp: List[bool]
    ignored: List[bool]
    matched_gt: List[int]
    n_unmatched_gt: int


def match(
    dets: Sequence[Detection],
    gts: Sequence[BBox],
    iou_threshold: float,
    gt_ignore: Optional[Sequence[bool]] = None,
    det_ignore: Optional[Sequence[bool]] = None,
) -> MatchResult:
    """Greedily match ranked detections to ground truth.

    Each detection takes the highest-IoU unmatched counted gt with IoU >= threshold
    (ties -> lowest gt index). Failing that, a detection that overlaps an
    ignored gt is ignored with it; an unmatched detection flagged in
    ``det_ignore`` is ignored too.

    Args:
        dets: Detections sorted by score, highest first
        gts: Ground-truth boxes
        iou_threshold: Matching threshold
        gt_ignore: Ground truths outside the evaluated scale bin
        det_ignore: Detections outside the evaluated scale bin

    Returns:
        MatchResult
    """
    n_det, n_gt = len(dets), len(gts)
    gt_ignore = np.zeros(n_gt, dtype=bool) if gt_ignore is None else np.asarray(gt_ignore, dtype=bool)
    det_ignore = np.zeros(n_det, dtype=bool) if det_ignore is None else np.asarray(det_ignore, dtype=bool)
    tp = [False] * n_det
    ignored = [False] * n_det
    matched_gt = [-1] * n_det
    if n_det and n_gt:
        overlaps = pairwise_iou(boxes_to_array([d.box for d in dets]), boxes_to_array(gts))
    else:
        overlaps = np.zeros((n_det, n_gt))
    taken = np.zeros(n_gt, dtype=bool)

    for d in range(n_det):
        for use_ignored in (False, True):
            candidates = (~taken) & (gt_ignore == use_ignored) & (overlaps[d] >= iou_threshold)
            if not candidates.any():
                continue
            g = int(np.argmax(np.where(candidates, overlaps[d], -1.0)))
            taken[g] = True
            matched_gt[d] = g
            tp[d] = not use_ignored
            ignored[d] = use_ignored
            break
        if matched_gt[d] < 0 and det_ignore[d]:
            ignored[d] = True

    n_unmatched = int(((~taken) & (~gt_ignore)).sum())
    return MatchResult(tp=tp, ignored=ignored, matched_gt=matched_gt, n_unmatched_gt=n_unmatched)


def precision_at_recall_points(flags: Sequence[bool], n_gt: int, interpolate: bool = True) -> np.ndarray:
    """Precision sampled at the 101 recall points {0, 0.01, ..., 1}; 0 past the last recall."""
    flags = np.asarray(flags, dtype=bool)
    q = np.zeros(len(RECALL_POINTS))
    if n_gt <= 0 or flags.size == 0:
        return q
    tp = np.cumsum(flags).astype(np.float64)
    fp = np.cumsum(~flags).astype(np.float64)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    if interpolate:
        precision = np.maximum.accumulate(precision[::-1])[::-1]
    indices = np.searchsorted(recall, RECALL_POINTS, side="left")
    valid = indices < flags.size
    q[valid] = precision[indices[valid]]
    return q


def average_precision(flags: Sequence[bool], n_gt: int, interpolate: bool = True) -> float:
    """101-point average precision of a ranked TP/FP sequence.

    Args:
        flags: True positive flags in rank order
        n_gt: Number of ground truths
        interpolate: Apply the monotone precision envelope (COCO); off samples raw precision

    Returns:
        AP in [0, 1]; with no ground truth, 1 for no detections and 0 otherwise

    With the envelope, [FP, TP] against one ground truth scores 0.5: every
    recall point from 0 to 1 reads the precision 0.5 reached at full recall.
    The raw curve reads 0 at recall 0 and gives 50/101.
    """
    if n_gt < 0:
        raise ValueError(f"n_gt must be >= 0, got {n_gt}")
    if n_gt == 0:
        return 1.0 if len(flags) == 0 else 0.0
    return float(precision_at_recall_points(flags, n_gt, interpolate).mean())


def _scale_ignore(areas: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return (areas < lo) | (areas > hi)


def _pooled_flags(
    dets_by_scene: Mapping[int, Sequence[Detection]],
    gts_by_scene: Mapping[int, Sequence[BBox]],
    iou_threshold: float,
    area_range: Tuple[float, float],
) -> Tuple[List[bool], int]:
    pooled: List[Tuple[float, int, int, bool]] = []
    n_gt = 0
    lo, hi = area_range
    for scene_id in sorted(gts_by_scene):
        gts = list(gts_by_scene[scene_id])
        dets = list(dets_by_scene.get(scene_id, []))
        ranked = [dets[i] for i in _ranked(dets)]
        gt_areas = box_area(boxes_to_array(gts)) if gts else np.zeros(0)
        det_areas = box_area(boxes_to_array([d.box for d in ranked])) if ranked else np.zeros(0)
        gt_ignore = _scale_ignore(gt_areas, lo, hi)
        det_ignore = _scale_ignore(det_areas, lo, hi)
        result = match(ranked, gts, iou_threshold, gt_ignore, det_ignore)
        n_gt += int((~gt_ignore).sum())
        for det, tp, ignored in zip(ranked, result.tp, result.ignored):
            if not ignored:
                pooled.append((det.fused, det.scene_id, det.index, tp))
    pooled.sort(key=lambda item: (-item[0], item[1], item[2]))
    return [item[3] for item in pooled], n_gt


def evaluate(
    dets_by_scene: Mapping[int, Sequence[Detection]],
    gts_by_scene: Mapping[int, Sequence[BBox]],
    thresholds: Sequence[float] = COCO_THRESHOLDS,
    scale_bins: Tuple[float, float] = DEFAULT_SCALE_BINS,
) -> EvalResult:
    """COCO-style evaluation pooled over scenes.

    The headline AP always averages the ten thresholds 0.50:0.05:0.95;
    ``thresholds`` adds further ones to ``ap_at``. Scale-restricted AP ignores
    ground truth outside the area bin, the detections matched to it, and
    unmatched detections outside the bin. A bin without ground truth reports
    NaN.

    Args:
        dets_by_scene: Detections per scene id
        gts_by_scene: Ground-truth boxes per scene id
        thresholds: Extra IoU thresholds to report
        scale_bins: Area limits between small/medium and medium/large

    Returns:
        EvalResult

    Raises:
        UnknownSceneError: If detections reference a scene without ground truth
    """
    unknown = sorted(set(dets_by_scene) - set(gts_by_scene))
    if unknown:
        raise UnknownSceneError(f"Detections reference unknown scene ids {unknown}")
    small, large = scale_bins
    ranges = {
        "all": (0.0, float("inf")),
        "small": (0.0, small),
        "medium": (small, large),
        "large": (large, float("inf")),
    }
    evaluated = sorted(set(COCO_THRESHOLDS) | {round(float(t), 2) for t in thresholds})

    ap_at: Dict[str, float] = {}
    pr_curves: Dict[str, List[float]] = {}
    by_scale: Dict[str, List[float]] = {name: [] for name in ranges if name != "all"}
    for t in evaluated:
        key = f"{t:.2f}"
        flags, n_gt = _pooled_flags(dets_by_scene, gts_by_scene, t, ranges["all"])
        ap_at[key] = average_precision(flags, n_gt)
        pr_curves[key] = precision_at_recall_points(flags, n_gt).tolist()
        if t in COCO_THRESHOLDS:
            for name in by_scale:
                flags, n_gt = _pooled_flags(dets_by_scene, gts_by_scene, t, ranges[name])
                by_scale[name].append(average_precision(flags, n_gt) if n_gt else math.nan)

    coco = [ap_at[f"{t:.2f}"] for t in COCO_THRESHOLDS]
    result = EvalResult(
        ap=float(np.mean(coco)),
        ap50=ap_at["0.50"],
        ap75=ap_at["0.75"],
        ap_at=ap_at,
        ap_small=float(np.mean(by_scale["small"])),
        ap_medium=float(np.mean(by_scale["medium"])),
        ap_large=float(np.mean(by_scale["large"])),
        pr_curves=pr_curves,
    )
    logger.debug(f"Evaluated {sum(len(d) for d in dets_by_scene.values())} detections: AP={result.ap:.4f}")
    return result


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve via average ranks (ties count one half).

    Raises:
        ValueError: If only one class is present
    """
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both positive and negative labels")
    ranks = pd.Series(np.asarray(scores, dtype=np.float64)).rank(method="average").to_numpy()
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
