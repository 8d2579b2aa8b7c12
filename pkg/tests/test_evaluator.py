"""Tests for NMS, matching and COCO-style average precision."""

import math

import numpy as np
import pytest

from app.core.errors import UnknownSceneError
from app.core.evaluator import (
    RECALL_POINTS,
    average_precision,
    cap_rois,
    evaluate,
    match,
    nms,
    precision_at_recall_points,
    roc_auc,
)
from app.core.geometry import iou
from app.models.box import BBox
from app.models.detection import Detection, ScoreTriple
from app.utils.output import eval_to_dict


def _det(coords, score, index=0, scene_id=0):
    return Detection(
        box=BBox.from_xyxy(coords),
        scores=ScoreTriple(score_cls=score),
        fused=score,
        scene_id=scene_id,
        index=index,
    )


def _random_dets(rng, n, scene_id=0):
    xy = rng.uniform(0, 200, size=(n, 2))
    wh = rng.uniform(5, 60, size=(n, 2))
    # Coarse scores so ties occur.
    scores = rng.integers(0, 20, size=n) / 20.0
    return [
        _det((x, y, x + w, y + h), float(s), index=i, scene_id=scene_id)
        for i, ((x, y), (w, h), s) in enumerate(zip(xy, wh, scores))
    ]


def _jittered(box, rng, sd):
    x1, y1, x2, y2 = np.array(box.to_list()) + rng.normal(0, sd, size=4)
    return min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2)


def _reference_nms(dets, threshold):
    """Exhaustive greedy NMS over the full n x n overlap table."""
    coords = np.array([d.box.to_list() for d in dets])
    lo = np.maximum(coords[:, None, :2], coords[None, :, :2])
    hi = np.minimum(coords[:, None, 2:], coords[None, :, 2:])
    inter = np.clip(hi - lo, 0.0, None).prod(axis=2)
    areas = (coords[:, 2] - coords[:, 0]) * (coords[:, 3] - coords[:, 1])
    union = areas[:, None] + areas[None, :] - inter
    overlaps = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].fused, dets[i].index))
    kept = []
    for i in order:
        if not kept or overlaps[i, kept].max() <= threshold:
            kept.append(i)
    return [dets[i] for i in kept]


def _reference_ap(dets_by_scene, gts_by_scene, threshold):
    """Loop-based AP over all scales at one threshold."""
    pooled = []
    n_gt = 0
    for scene_id, gts in gts_by_scene.items():
        n_gt += len(gts)
        taken = [False] * len(gts)
        dets = sorted(dets_by_scene.get(scene_id, []), key=lambda d: (-d.fused, d.index))
        for det in dets:
            best, best_iou = -1, threshold
            for g, gt in enumerate(gts):
                overlap = iou(det.box, gt)
                if not taken[g] and overlap >= best_iou and (best < 0 or overlap > best_iou):
                    best, best_iou = g, overlap
            if best >= 0:
                taken[best] = True
            pooled.append((det.fused, det.scene_id, det.index, best >= 0))
    pooled.sort(key=lambda item: (-item[0], item[1], item[2]))
    tp = fp = 0
    recalls, precisions = [], []
    for *_, hit in pooled:
        tp += hit
        fp += not hit
        recalls.append(tp / n_gt)
        precisions.append(tp / (tp + fp))
    total = 0.0
    for r in [k / 100 for k in range(101)]:
        reachable = [p for rec, p in zip(recalls, precisions) if rec >= r - 1e-12]
        total += max(reachable) if reachable else 0.0
    return total / 101


class TestNms:

    def test_duplicate_suppressed(self):
        dets = [_det((0, 0, 10, 10), 0.9, 0), _det((0, 0, 10, 10), 0.8, 1)]
        assert [d.index for d in nms(dets, 0.3)] == [0]

    def test_disjoint_boxes_all_kept(self):
        dets = [_det((0, 0, 10, 10), 0.2, 0), _det((20, 20, 30, 30), 0.9, 1), _det((40, 0, 50, 10), 0.5, 2)]
        assert [d.index for d in nms(dets, 0.3)] == [1, 2, 0]

    def test_tie_prefers_lower_index(self):
        dets = [_det((0, 0, 10, 10), 0.5, 1), _det((1, 0, 11, 10), 0.5, 0)]
        assert [d.index for d in nms(dets, 0.3)] == [0]

    def test_empty(self):
        assert nms([], 0.5) == []

    def test_matches_exhaustive_reference(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            dets = _random_dets(rng, int(rng.integers(1, 1001)))
            threshold = float(rng.uniform(0.1, 0.9))
            assert [d.index for d in nms(dets, threshold)] == [d.index for d in _reference_nms(dets, threshold)]

    def test_order_independent_and_idempotent(self):
        rng = np.random.default_rng(3)
        dets = _random_dets(rng, 80)
        kept = nms(dets, 0.5)
        shuffled = [dets[i] for i in rng.permutation(len(dets))]
        assert [d.index for d in nms(shuffled, 0.5)] == [d.index for d in kept]
        assert [d.index for d in nms(kept, 0.5)] == [d.index for d in kept]


class TestCapRois:

    def test_keeps_highest(self):
        dets = [_det((0, 0, 1, 1), i / 100.0, index=i) for i in range(100)]
        capped = cap_rois(dets, 96)
        assert len(capped) == 96
        assert min(d.index for d in capped) == 4

    def test_fewer_than_cap(self):
        dets = [_det((0, 0, 1, 1), 0.5, index=i) for i in range(3)]
        assert len(cap_rois(dets, 96)) == 3

    def test_zero_cap(self):
        assert cap_rois([_det((0, 0, 1, 1), 0.5)], 0) == []


class TestMatch:
    gt = BBox.from_xyxy((0, 0, 10, 10))

    def test_single_true_positive(self):
        result = match([_det((0, 0, 10, 10), 0.9)], [self.gt], 0.5)
        assert result.tp == [True]
        assert result.n_unmatched_gt == 0

    def test_each_gt_matched_once(self):
        dets = [_det((0, 0, 10, 10), 0.9, 0), _det((0, 0, 10, 9), 0.8, 1)]
        assert match(dets, [self.gt], 0.5).tp == [True, False]

    def test_below_threshold(self):
        result = match([_det((5, 5, 15, 15), 0.9)], [self.gt], 0.5)
        assert result.tp == [False]
        assert result.n_unmatched_gt == 1

    def test_ignored_gt_absorbs_detection(self):
        result = match([_det((0, 0, 10, 10), 0.9)], [self.gt], 0.5, gt_ignore=[True])
        assert result.tp == [False]
        assert result.ignored == [True]
        assert result.n_unmatched_gt == 0


class TestAveragePrecision:

    def test_perfect_single(self):
        assert average_precision([True], 1) == pytest.approx(1.0, abs=1e-9)

    def test_false_positive_first(self):
        assert average_precision([False, True], 1) == pytest.approx(0.5, abs=1e-9)
        assert average_precision([False, True], 1, interpolate=False) == pytest.approx(50 / 101, abs=1e-9)

    def test_recall_capped_at_half(self):
        assert average_precision([True, False], 2) == pytest.approx(51 / 101, abs=1e-9)

    def test_empty_conventions(self):
        assert average_precision([], 0) == 1.0
        assert average_precision([False], 0) == 0.0
        assert average_precision([], 3) == 0.0

    def test_negative_gt_count(self):
        with pytest.raises(ValueError):
            average_precision([], -1)

    def test_appending_monotonicity(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            flags = list(rng.random(int(rng.integers(1, 30))) < 0.5)
            n_gt = sum(flags) + int(rng.integers(1, 4))
            base = average_precision(flags, n_gt)
            assert average_precision(flags + [True], n_gt) >= base - 1e-12
            assert average_precision(flags + [False], n_gt) <= base + 1e-12

    def test_curve_has_one_value_per_recall_point(self):
        assert precision_at_recall_points([True, False, True], 2).shape == RECALL_POINTS.shape


class TestEvaluate:
    # Areas: 20x20 small, 50x50 medium, 120x120 large.
    gts = {
        0: [BBox.from_xyxy((0, 0, 20, 20)), BBox.from_xyxy((100, 100, 150, 150))],
        1: [BBox.from_xyxy((10, 10, 130, 130))],
    }

    def test_perfect_detections(self):
        dets = {
            scene_id: [_det(b.to_list(), 0.9, index=i, scene_id=scene_id) for i, b in enumerate(boxes)]
            for scene_id, boxes in self.gts.items()
        }
        result = evaluate(dets, self.gts)
        for name, value in result.metric_rows():
            assert value == pytest.approx(1.0), name

    def test_no_detections(self):
        result = evaluate({}, self.gts)
        for name, value in result.metric_rows():
            assert value == 0.0, name

    def test_scale_bin_without_ground_truth_is_nan(self):
        gts = {0: [BBox.from_xyxy((0, 0, 20, 20))]}
        missed = evaluate({}, gts)
        assert missed.ap == 0.0
        assert missed.ap_small == 0.0
        assert math.isnan(missed.ap_medium)
        assert math.isnan(missed.ap_large)

        found = evaluate({0: [_det((0, 0, 20, 20), 0.9)]}, gts)
        assert found.ap_small == pytest.approx(1.0)
        assert math.isnan(found.ap_medium)
        assert eval_to_dict(found)["by_scale"] == {"small": pytest.approx(1.0), "medium": None, "large": None}

    def test_unknown_scene(self):
        with pytest.raises(UnknownSceneError):
            evaluate({7: [_det((0, 0, 1, 1), 0.5, scene_id=7)]}, self.gts)

    def test_extra_thresholds_reported(self):
        result = evaluate({}, self.gts, thresholds=[0.7, 0.8, 0.9])
        assert set(result.ap_at) >= {"0.50", "0.70", "0.80", "0.90", "0.95"}
        assert len(result.pr_curves["0.90"]) == 101

    def test_fixture_matches_reference(self):
        gts = {
            0: [BBox.from_xyxy((0, 0, 40, 40)), BBox.from_xyxy((60, 60, 120, 110))],
            1: [BBox.from_xyxy((10, 20, 50, 70))],
            2: [BBox.from_xyxy((0, 0, 30, 30)), BBox.from_xyxy((100, 0, 160, 50)), BBox.from_xyxy((50, 50, 90, 90))],
        }
        dets = {
            0: [_det((2, 0, 40, 42), 0.95, 0, 0), _det((0, 0, 38, 40), 0.6, 1, 0), _det((62, 58, 120, 112), 0.4, 2, 0)],
            1: [_det((12, 22, 52, 66), 0.8, 0, 1), _det((200, 200, 220, 220), 0.7, 1, 1)],
            2: [_det((0, 0, 30, 27), 0.9, 0, 2), _det((100, 5, 150, 50), 0.5, 1, 2), _det((40, 40, 90, 95), 0.3, 2, 2)],
        }
        result = evaluate(dets, gts)
        for key in ("0.50", "0.75", "0.90"):
            assert result.ap_at[key] == pytest.approx(_reference_ap(dets, gts, float(key)), abs=1e-9), key

    def test_random_fixtures_match_reference(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            gts, dets = {}, {}
            for scene_id in range(3):
                gts[scene_id] = [d.box for d in _random_dets(rng, int(rng.integers(1, 6)))]
                jittered = []
                for i, gt in enumerate(gts[scene_id]):
                    jittered.append(_det(_jittered(gt, rng, 3), float(rng.random()), i, scene_id))
                extra = _random_dets(rng, int(rng.integers(0, 4)), scene_id)
                dets[scene_id] = jittered + [
                    d.model_copy(update={"index": len(jittered) + k}) for k, d in enumerate(extra)
                ]
            result = evaluate(dets, gts)
            for key in ("0.50", "0.75"):
                assert result.ap_at[key] == pytest.approx(_reference_ap(dets, gts, float(key)), abs=1e-9)

    def test_ap_decreases_with_threshold(self):
        rng = np.random.default_rng(5)
        gts = {0: [d.box for d in _random_dets(rng, 8)]}
        dets = {0: [_det(_jittered(b, rng, 2), 0.5 + 0.05 * i, i)
                    for i, b in enumerate(gts[0])]}
        result = evaluate(dets, gts)
        values = [result.ap_at[f"{0.5 + 0.05 * k:.2f}"] for k in range(10)]
        assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))


class TestRocAuc:

    def test_known_value(self):
        assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)

    def test_ties_count_half(self):
        assert roc_auc([0.5, 0.5], [0, 1]) == pytest.approx(0.5)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            roc_auc([0.1, 0.2], [1, 1])
