"""Tests for the heatmap predictors, toy models, gradient checks and model files."""

import json

import numpy as np
import pytest
import torch

from app.core.cascade import run_stage
from app.core.errors import NonFiniteError, SchemaVersionError
from app.core.geometry import boxes_to_array, pairwise_iou
from app.core.grid_codec import decode_points, represented_region
from app.learning.gradcheck import central_difference, gradcheck
from app.learning.predictors import OraclePredictor, oracle_predict
from app.learning.serialization import load_model, model_from_dict, model_to_dict, save_model
from app.learning.toy_models import (
    ToyHeatmapModel,
    ToyIsmModel,
    ToyPredictor,
    ToyRsmModel,
    count_parameters,
    get_flat_parameters,
    set_flat_parameters,
    toy_backward,
    toy_forward,
)
from app.learning.training import (
    CmmObjective,
    IsmObjective,
    build_scorer_dataset,
    build_stage_batches,
    scene_proposals,
    train_heatmap_model,
)
from app.models.box import BBox, ImageBounds
from app.models.cascade import CascadeConfig, StageConfig
from app.models.heatmap import GridLayout
from app.models.predictor import OracleParams
from app.models.scene import ProposalParams
from app.models.training import TrainingConfig
from app.utils.scene_generator import generate_corpus, generate_proposals

LAYOUT = GridLayout()


def _small_corpus(seed=0, n_scenes=2):
    scenes = generate_corpus(seed, n_scenes, ImageBounds(width=640, height=480), 4, 0.0)
    proposals = scene_proposals(scenes, ProposalParams(per_object=5, n_background=5), seed)
    return scenes, proposals


class TestOraclePredictor:

    def test_deterministic(self, single_object_scene):
        params = OracleParams(noise_sigma=0.7)
        box = BBox.from_xyxy((55, 65, 135, 125))
        first = oracle_predict(single_object_scene, box, 2.0, params, seed=9)
        second = oracle_predict(single_object_scene, box, 2.0, params, seed=9)
        assert np.array_equal(first.values, second.values)

    def test_exact_oracle_recovers_points(self, single_object_scene, exact_params):
        box = BBox.from_xyxy((55, 65, 135, 125))
        decoded = decode_points(oracle_predict(single_object_scene, box, 2.0, exact_params, seed=0))
        region = represented_region(box, 2.0)
        bound = max(region.width, region.height) / LAYOUT.resolution
        truth = LAYOUT.grid_points(single_object_scene.gts[0].box)
        assert np.abs(decoded.locations - truth).max() <= bound

    def test_truncated_point_lands_in_border_cell(self, single_object_scene):
        # Ratio 1 region is the box itself; the gt's right column lies past x2 = 120.
        box = BBox.from_xyxy((60, 60, 120, 120))
        decoded = decode_points(oracle_predict(single_object_scene, box, 1.0, OracleParams(), seed=0))
        cell = box.width / LAYOUT.resolution
        for k in (2, 5, 8):
            assert box.x2 - cell <= decoded.locations[k, 0] <= box.x2
            assert decoded.cells[k][1] == LAYOUT.resolution - 1

    def test_untruncated_point_is_left_flat(self, single_object_scene, exact_params):
        box = BBox.from_xyxy((60, 60, 120, 120))
        heatmaps = oracle_predict(single_object_scene, box, 1.0, exact_params, seed=0)
        assert np.all(heatmaps.values[2] == 0.0)
        assert heatmaps.values[0].max() == 1.0

    def test_unmatched_box_gets_background(self, single_object_scene):
        params = OracleParams(background_level=0.05)
        heatmaps = oracle_predict(single_object_scene, BBox.from_xyxy((0, 0, 30, 30)), 2.0, params, seed=0)
        assert np.all(heatmaps.values == 0.05)

    def test_background_level_must_stay_below_neighbours(self):
        with pytest.raises(ValueError):
            OracleParams(background_level=0.45)

    def test_truncation_hurts_small_ratios(self):
        scenes = generate_corpus(31, 13, ImageBounds(width=640, height=480), 4, 0.0)
        params = ProposalParams(jitter_sigma=0.15, per_object=10, n_background=0)
        predictor = OraclePredictor(OracleParams(noise_sigma=0.0, truncate=True))
        small, large = [], []
        for scene in scenes:
            proposals = generate_proposals(scene, params, 31)
            gts = boxes_to_array(scene.gt_boxes)
            matched = pairwise_iou(boxes_to_array(proposals), gts).argmax(axis=1)
            exits = []
            for box, g in zip(proposals, matched):
                region = represented_region(box, 1.0)
                points = LAYOUT.grid_points(scene.gts[g].box)
                exits.append(bool(
                    (points[:, 0] < region.x1).any() or (points[:, 0] > region.x2).any()
                    or (points[:, 1] < region.y1).any() or (points[:, 1] > region.y2).any()
                ))
            for ratio, sink in ((1.0, small), (2.0, large)):
                trace = run_stage(StageConfig(mapping_ratio=ratio, iou_threshold=0.5), proposals, predictor,
                                  scene, LAYOUT, seed=31)
                sink.extend(v for v, e in zip(trace.ious, exits) if e)
        assert len(small) >= 100
        assert np.mean(small) < np.mean(large)


class TestToyModels:

    def test_zero_parameters_give_half(self, single_object_scene):
        model = ToyHeatmapModel()
        set_flat_parameters(model, np.zeros(count_parameters(model)))
        heatmaps = toy_forward(model, single_object_scene, BBox.from_xyxy((50, 50, 100, 100)), 2.0)
        np.testing.assert_array_equal(heatmaps.values, np.full((9, 28, 28), 0.5))

    def test_forward_is_deterministic(self, single_object_scene):
        box = BBox.from_xyxy((50, 50, 100, 100))
        first = toy_forward(ToyHeatmapModel(seed=4), single_object_scene, box, 1.5)
        second = toy_forward(ToyHeatmapModel(seed=4), single_object_scene, box, 1.5)
        assert np.array_equal(first.values, second.values)

    def test_parameter_budget(self):
        assert count_parameters(ToyHeatmapModel()) <= 20_000

    def test_flat_parameter_round_trip(self):
        model = ToyIsmModel(seed=2)
        params = get_flat_parameters(model)
        set_flat_parameters(model, params * 2.0)
        np.testing.assert_array_equal(get_flat_parameters(model), params * 2.0)

    def test_non_finite_forward_raises(self, single_object_scene):
        model = ToyHeatmapModel()
        set_flat_parameters(model, np.full(count_parameters(model), np.nan))
        with pytest.raises(NonFiniteError) as info:
            toy_forward(model, single_object_scene, BBox.from_xyxy((50, 50, 100, 100)), 2.0)
        assert "fc1.weight" in info.value.diagnostics

    def test_backward_matches_autograd_sum(self):
        model = ToyRsmModel(seed=1)
        inputs = np.random.default_rng(0).random((4, 40))
        grad = toy_backward(model, inputs, np.ones((4, 1)))
        model.zero_grad()
        model(torch.as_tensor(inputs)).sum().backward()
        expected = torch.cat([p.grad.reshape(-1) for p in model.parameters()]).numpy()
        np.testing.assert_allclose(grad, expected, rtol=1e-12)

    def test_toy_predictor_protocol(self, single_object_scene):
        predictor = ToyPredictor(ToyHeatmapModel())
        heatmaps = predictor.predict(single_object_scene, BBox.from_xyxy((50, 50, 100, 100)), 2.0, LAYOUT, 0)
        assert heatmaps.values.shape == (9, 28, 28)


class TestGradcheck:

    @staticmethod
    def _quadratic():
        matrix = np.diag(np.arange(1.0, 6.0))
        return (lambda x: 0.5 * float(x @ matrix @ x)), (lambda x: matrix @ x)

    def test_central_difference(self):
        assert central_difference(lambda x: float(x[0] ** 3), np.array([2.0]), 0) == pytest.approx(12.0, rel=1e-8)

    def test_quadratic_passes_tight_tolerance(self):
        loss, grad = self._quadratic()
        report = gradcheck(loss, grad, np.array([1.0, -2.0, 0.5, 3.0, -1.5]), tolerance=1e-8)
        assert report.passed
        assert report.checked == 5

    def test_corrupted_gradient_is_named(self):
        loss, grad = self._quadratic()
        report = gradcheck(loss, grad, np.array([1.0, -2.0, 0.5, 3.0, -1.5]), tolerance=1e-8, corrupt=True)
        assert not report.passed
        # Largest |grad| entry is 4 * 3.0 at index 3.
        assert report.corrupted_coordinate == 3
        assert report.worst_coordinate == 3
        assert report.max_relative_error == pytest.approx(0.5, rel=1e-6)

    def test_wrong_gradient_shape(self):
        with pytest.raises(ValueError):
            gradcheck(lambda x: 0.0, lambda x: np.zeros(2), np.zeros(3))

    def test_cmm_loss_through_toy_model(self):
        scenes, proposals = _small_corpus()
        cfg = CascadeConfig()
        model = ToyHeatmapModel(seed=0)
        batches = build_stage_batches(scenes, proposals, cfg, seed=0, max_samples_per_stage=4)
        objective = CmmObjective(model, batches, cfg)
        report = gradcheck(objective.value, objective.gradient, get_flat_parameters(model), tolerance=1e-4)
        assert report.passed, report
        assert report.checked == 100

    def test_ism_loss_through_toy_model(self):
        scenes, proposals = _small_corpus()
        predictor = OraclePredictor(OracleParams(noise_sigma=0.5))
        dataset = build_scorer_dataset(scenes, proposals, CascadeConfig(), predictor, seed=0)
        model = ToyIsmModel(seed=0)
        objective = IsmObjective(model, dataset.features, dataset.ious)
        report = gradcheck(objective.value, objective.gradient, get_flat_parameters(model), tolerance=1e-4)
        assert report.passed, report


class TestSerialization:

    def test_round_trip(self, tmp_path):
        model = ToyIsmModel(seed=3, trained=True)
        path = save_model(model, tmp_path / "ism.json")
        loaded = load_model(path)
        assert isinstance(loaded, ToyIsmModel)
        assert loaded.trained
        np.testing.assert_array_equal(get_flat_parameters(loaded), get_flat_parameters(model))

    def test_heatmap_model_keeps_config(self):
        model = ToyHeatmapModel(resolution=14, hidden=8, seed=5)
        loaded = model_from_dict(model_to_dict(model))
        assert loaded.config() == model.config()

    def test_version_mismatch(self):
        document = model_to_dict(ToyRsmModel())
        document["format_version"] = 99
        with pytest.raises(SchemaVersionError):
            model_from_dict(document)

    def test_shape_mismatch(self):
        document = model_to_dict(ToyRsmModel())
        document["parameters"][0]["shape"] = [1, 1]
        with pytest.raises(ValueError):
            model_from_dict(document)

    def test_unknown_kind(self, tmp_path):
        path = tmp_path / "model.json"
        document = model_to_dict(ToyRsmModel())
        document["kind"] = "resnet"
        path.write_text(json.dumps(document))
        with pytest.raises(ValueError):
            load_model(path)


class TestHeatmapTraining:

    def test_training_halves_the_loss(self):
        scenes = generate_corpus(0, 20, ImageBounds(width=640, height=480), 4, 0.0)
        proposals = scene_proposals(scenes, ProposalParams(per_object=5, n_background=5), 0)
        cfg = CascadeConfig()
        batches = build_stage_batches(scenes, proposals, cfg, seed=0, max_samples_per_stage=64)
        curve = train_heatmap_model(ToyHeatmapModel(seed=0), batches, cfg, TrainingConfig(heatmap_steps=500))
        assert len(curve) == 501
        assert curve[-1]["loss"] <= 0.5 * curve[0]["loss"]

    def test_no_samples(self):
        with pytest.raises(ValueError):
            train_heatmap_model(ToyHeatmapModel(), [], CascadeConfig(), TrainingConfig())
