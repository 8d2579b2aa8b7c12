"""Tests for the fused score, the scorers and the loss assembly."""

import math

import numpy as np
import pytest
import torch

from app.core.errors import ModelNotTrainedError
from app.core.geometry import iou
from app.core.scoring import (
    ISM_FEATURE_DIM,
    IsmFeatures,
    OracleIsm,
    OracleRsm,
    calibrated_confidence,
    extract_ism_features,
    fused_score,
    ism_loss,
    ism_loss_gradient,
    ism_predict,
    rsm_predict,
    rsm_sample,
    scoring_loss,
    total_loss,
)
from app.learning.predictors import oracle_predict
from app.learning.toy_models import ToyIsmModel, ToyRsmModel
from app.models.box import BBox, ImageBounds
from app.models.detection import IsmLossType, ScoreTriple
from app.models.predictor import OracleParams
from app.models.scene import GroundTruth, Scene
from tests.conftest import make_scene


class TestFusedScore:

    def test_reference_value(self):
        triple = ScoreTriple(score_cls=0.9, score_ism=0.8, score_rsm=0.7)
        assert fused_score(triple, 0.8) == pytest.approx(0.7160, abs=1e-4)

    def test_gamma_endpoints(self):
        triple = ScoreTriple(score_cls=0.9, score_ism=0.8, score_rsm=0.7)
        assert fused_score(triple, 1.0) == pytest.approx(0.72)
        assert fused_score(triple, 0.0) == pytest.approx(0.7)

    def test_zero_to_the_zero_is_one(self):
        assert fused_score(ScoreTriple(score_cls=0.5, score_ism=0.5, score_rsm=0.0), 1.0) == pytest.approx(0.25)
        assert fused_score(ScoreTriple(score_cls=0.0, score_ism=0.5, score_rsm=0.4), 0.0) == pytest.approx(0.4)

    def test_range_and_continuity(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            c, i, r = rng.uniform(0.01, 1.0, size=3)
            triple = ScoreTriple(score_cls=c, score_ism=i, score_rsm=r)
            gamma = float(rng.random())
            value = fused_score(triple, gamma)
            assert 0.0 <= value <= 1.0
            assert fused_score(triple, min(gamma + 1e-9, 1.0)) == pytest.approx(value, abs=1e-6)

    @pytest.mark.parametrize("field", ["score_cls", "score_ism", "score_rsm"])
    def test_monotone_in_each_score(self, field):
        rng = np.random.default_rng(5)
        for _ in range(2000):
            c, i, r = rng.uniform(0.0, 1.0, size=3)
            gamma = float(rng.uniform(0.0, 1.0))
            low = ScoreTriple(score_cls=c, score_ism=i, score_rsm=r)
            raised = low.model_copy(update={field: float(rng.uniform(getattr(low, field), 1.0))})
            assert fused_score(raised, gamma) >= fused_score(low, gamma) - 1e-12

    def test_invalid_gamma(self):
        with pytest.raises(ValueError):
            fused_score(ScoreTriple(score_cls=0.5), 1.5)


class TestOracleScorers:
    scene = make_scene([(0, 0, 10, 10)])

    def test_ism_reads_true_iou(self):
        box = BBox.from_xyxy((0, 0, 10, 12))
        fg, bg = OracleIsm().predict(box, self.scene)
        assert fg == pytest.approx(iou(box, self.scene.gts[0].box))
        assert fg + bg == pytest.approx(1.0)

    def test_ism_background(self):
        assert OracleIsm().predict(BBox.from_xyxy((50, 50, 60, 60)), self.scene) == (0.0, 1.0)

    def test_full_extent_penalizes_truncated_objects(self):
        bounds = ImageBounds(width=100, height=100)
        visible = BBox.from_xyxy((0, 20, 30, 60))
        scene = Scene(id=0, bounds=bounds, gts=[
            GroundTruth(box=visible, truncated=True, full_extent=BBox.from_xyxy((-20, 20, 30, 60))),
        ])
        visible_score, _ = OracleIsm().predict(visible, scene)
        amodal_score, _ = OracleIsm("full_extent").predict(visible, scene)
        assert visible_score == pytest.approx(1.0)
        assert amodal_score == pytest.approx(0.6)

    def test_unknown_reference(self):
        with pytest.raises(ValueError):
            OracleIsm("nowhere")

    def test_rsm_calibration(self):
        assert calibrated_confidence(0.5) == pytest.approx(0.5)
        assert OracleRsm().predict(self.scene.gts[0].box, self.scene) == pytest.approx(1 / (1 + math.exp(-4)))
        assert OracleRsm().predict(BBox.from_xyxy((50, 50, 60, 60)), self.scene) <= 0.02


class TestToyScorers:
    scene = make_scene([(40, 40, 120, 100)])

    def _features(self):
        box = BBox.from_xyxy((45, 40, 120, 105))
        heatmaps = oracle_predict(self.scene, box, 1.25, OracleParams(noise_sigma=0.5), seed=1)
        return box, extract_ism_features(heatmaps, box, self.scene.bounds)

    def test_feature_layout(self):
        _, features = self._features()
        assert features.vector.shape == (ISM_FEATURE_DIM,)
        assert np.all(features.vector[0:9] == 1.0)

    def test_missing_heatmaps_summarize_as_zeros(self):
        box = BBox.from_xyxy((0, 0, 20, 20))
        vector = extract_ism_features(None, box, self.scene.bounds).vector
        assert np.all(vector[:36] == 0.0)
        np.testing.assert_allclose(vector[36:], [0.05, 0.05, 0.1, 0.1])

    def test_untrained_models_refuse(self):
        box, features = self._features()
        with pytest.raises(ModelNotTrainedError):
            ism_predict(features, ToyIsmModel())
        with pytest.raises(ModelNotTrainedError):
            rsm_predict(box, features, ToyRsmModel())

    def test_trained_models_score_in_unit_interval(self):
        box, features = self._features()
        fg, bg = ism_predict(features, ToyIsmModel(trained=True))
        assert 0.0 <= fg <= 1.0 and 0.0 <= bg <= 1.0
        assert 0.0 <= rsm_predict(box, features, ToyRsmModel(trained=True)) <= 1.0

    def test_feature_length_checked(self):
        with pytest.raises(ValueError):
            IsmFeatures(vector=np.zeros(3))


class TestIsmLoss:

    def test_zero_residual(self):
        t = np.array([0.3, 0.9])
        assert ism_loss(t, 1.0 - t, t) == 0.0

    def test_closed_form(self):
        assert ism_loss(np.array([0.5]), np.array([0.5]), np.array([1.0])) == pytest.approx(0.5)

    def test_batch_mean(self):
        one = ism_loss(np.array([0.2]), np.array([0.6]), np.array([0.7]))
        two = ism_loss(np.array([0.2, 0.2]), np.array([0.6, 0.6]), np.array([0.7, 0.7]))
        assert one == pytest.approx(two)

    def test_loss_variants(self):
        fg, bg, t = np.array([0.5]), np.array([0.5]), np.array([1.0])
        assert ism_loss(fg, bg, t, IsmLossType.L1) == pytest.approx(1.0)
        assert ism_loss(fg, bg, t, "smooth_l1") == pytest.approx(0.25)

    def test_target_range(self):
        with pytest.raises(ValueError):
            ism_loss(np.array([0.5]), np.array([0.5]), np.array([1.5]))

    def test_torch_and_numpy_agree(self):
        rng = np.random.default_rng(0)
        fg, bg, t = rng.random(8), rng.random(8), rng.random(8)
        expected = ism_loss(fg, bg, t)
        actual = ism_loss(torch.as_tensor(fg), torch.as_tensor(bg), torch.as_tensor(t))
        assert float(actual) == pytest.approx(expected, rel=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        fg, bg, t = rng.random(5), rng.random(5), rng.random(5)
        d_fg, d_bg = ism_loss_gradient(fg, bg, t)
        step = 1e-6
        for k in range(5):
            bump = np.zeros(5)
            bump[k] = step
            numeric_fg = (ism_loss(fg + bump, bg, t) - ism_loss(fg - bump, bg, t)) / (2 * step)
            numeric_bg = (ism_loss(fg, bg + bump, t) - ism_loss(fg, bg - bump, t)) / (2 * step)
            assert d_fg[k] == pytest.approx(numeric_fg, rel=1e-6, abs=1e-9)
            assert d_bg[k] == pytest.approx(numeric_bg, rel=1e-6, abs=1e-9)


class TestLossAssembly:

    def test_all_zero(self):
        assert total_loss(0, 0, scoring_loss(0, 0), 0) == 0.0

    def test_weighted_sum(self):
        assert total_loss(1, 2, 3, 4) == 10.0
        assert total_loss(1, 2, 3, 4, (0.5, 1, 1, 2)) == pytest.approx(13.5)
        assert scoring_loss(1.0, 2.0, 0.5, 2.0) == pytest.approx(4.5)

    def test_scoring_weight_scales_its_term_only(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            l_rpn, l_cls, l_scoring, l_cmm = rng.uniform(0.0, 5.0, size=4)
            weights = rng.uniform(0.1, 2.0, size=4)
            doubled = weights.copy()
            doubled[2] *= 2.0
            base = total_loss(l_rpn, l_cls, l_scoring, l_cmm, tuple(weights))
            assert total_loss(l_rpn, l_cls, l_scoring, l_cmm, tuple(doubled)) - base == pytest.approx(
                weights[2] * l_scoring
            )
            assert total_loss(0, 0, l_scoring, 0, tuple(doubled)) == pytest.approx(
                2.0 * total_loss(0, 0, l_scoring, 0, tuple(weights))
            )

    def test_negative_component_rejected(self):
        with pytest.raises(ValueError):
            total_loss(-1, 0, 0, 0)
        with pytest.raises(ValueError):
            scoring_loss(0.0, -0.1)

    def test_wrong_weight_count(self):
        with pytest.raises(ValueError):
            total_loss(1, 1, 1, 1, (1, 1))


class TestRsmSample:

    def test_positive_share_capped(self):
        items, labels = rsm_sample(list(range(300)), list(range(1000, 2000)), seed=0)
        assert len(items) == 512
        assert labels.sum() == 128

    def test_few_positives(self):
        items, labels = rsm_sample([1, 2], list(range(100, 1000)), seed=0)
        assert labels.sum() == 2
        assert len(items) == 512

    def test_deterministic(self):
        first = rsm_sample(list(range(50)), list(range(50, 900)), seed=4)
        second = rsm_sample(list(range(50)), list(range(50, 900)), seed=4)
        assert first[0] == second[0]
