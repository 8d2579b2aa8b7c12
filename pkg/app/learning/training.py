"""Training module for the toy models.

This module contains the oracle-driven heatmap training set, the torch form
of the staged BCE loss, the scorer datasets and the optimizer loops. Every
loop is full-batch and seeded, so a run is reproducible bitwise.
"""

import logging
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict
from torch import nn

from app.core.cascade import BCE_EPS, cmm_loss, cmm_loss_gradient, run_cascade, select_positives
from app.core.errors import NonFiniteError
from app.core.geometry import boxes_to_array, pairwise_iou
from app.core.grid_codec import encode_target
from app.core.scoring import ism_loss, ism_loss_gradient, pooled_features
from app.learning.predictors import HeatmapPredictor, OraclePredictor
from app.learning.toy_models import (
    ToyHeatmapModel,
    ToyScorer,
    box_inputs,
    parameter_diagnostics,
    set_flat_parameters,
    toy_backward,
)
from app.models.box import BBox
from app.models.cascade import CascadeConfig
from app.models.detection import IsmLossType
from app.models.heatmap import HeatmapSet
from app.models.predictor import OracleParams
from app.models.scene import ProposalParams, Scene
from app.models.training import OptimizerKind, TrainingConfig
from app.utils.scene_generator import generate_proposals
from app.utils.seeding import derive_seed

logger = logging.getLogger(__name__)

SGD_MOMENTUM = 0.9
SGD_WEIGHT_DECAY = 4e-5
RSM_POSITIVE_IOU = 0.5

LossCurve = List[Dict[str, object]]


class StageBatch(BaseModel):
    """Oracle-driven training samples of one cascade stage.

    Attributes:
        stage: Zero-based stage index
        ratio: Mapping ratio of the stage
        boxes: Selected stage input boxes
        inputs: Model inputs, one row per box
        targets: Encoded ground-truth heatmaps, one per box
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    stage: int
    ratio: float
    boxes: List[BBox]
    inputs: np.ndarray
    targets: List[HeatmapSet]

    def target_tensors(self) -> Tuple[torch.Tensor, torch.Tensor]:
        """Stacked targets (n, 9, S, S) and the per-channel keep mask (n, 9)."""
        values = np.stack([t.values for t in self.targets])
        keep = np.stack([~t.out_of_region for t in self.targets])
        return torch.as_tensor(values), torch.as_tensor(keep)


def exact_oracle() -> OraclePredictor:
    """Noise-free oracle that leaves out-of-region points unlabelled."""
    return OraclePredictor(OracleParams(noise_sigma=0.0, truncate=False))


def build_stage_batches(
    scenes: Sequence[Scene],
    proposals: Dict[int, List[BBox]],
    cfg: CascadeConfig,
    seed: int,
    max_samples_per_stage: int = 256,
) -> List[StageBatch]:
    """Collect per-stage training samples from an exact-oracle cascade pass.

    Stage j trains on the boxes that entered stage j, filtered by the stage's
    IoU threshold and labelled with their matched ground truth.
    """
    oracle = exact_oracle()
    collected: List[List[Tuple[Scene, BBox, BBox]]] = [[] for _ in cfg.stages]
    for scene in scenes:
        _, traces = run_cascade(cfg, proposals[scene.id], oracle, scene, seed)
        for j, (stage, trace) in enumerate(zip(cfg.stages, traces)):
            for box_index, gt_index in select_positives(trace.input_boxes, scene.gt_boxes, stage.iou_threshold):
                collected[j].append((scene, trace.input_boxes[box_index], scene.gt_boxes[gt_index]))

    batches = []
    rng = np.random.default_rng(derive_seed(seed, len(cfg.stages)))
    for j, (stage, samples) in enumerate(zip(cfg.stages, collected)):
        if len(samples) > max_samples_per_stage:
            keep = np.sort(rng.choice(len(samples), size=max_samples_per_stage, replace=False))
            samples = [samples[i] for i in keep]
        ratio = stage.mapping_ratio
        batches.append(StageBatch(
            stage=j,
            ratio=ratio,
            boxes=[box for _, box, _ in samples],
            inputs=np.array([box_inputs(s, box, ratio) for s, box, _ in samples]).reshape(-1, 6),
            targets=[encode_target(gt, box, ratio, cfg.layout) for _, box, gt in samples],
        ))
        logger.info(f"Stage {j}: {len(samples)} oracle-driven samples at ratio {ratio}")
    return batches


def cmm_loss_torch(
    predictions: Sequence[torch.Tensor],
    targets: Sequence[Tuple[torch.Tensor, torch.Tensor]],
    cfg: CascadeConfig,
) -> torch.Tensor:
    """Torch form of ``cmm_loss`` for optimizer loops.

    Args:
        predictions: Per stage, model output of shape (n, 9, S, S)
        targets: Per stage, ``StageBatch.target_tensors()``
        cfg: Cascade settings supplying beta_j and omega
    """
    total = torch.zeros((), dtype=torch.float64)
    for stage, pred, (target, keep) in zip(cfg.stages, predictions, targets):
        if target.shape[0] == 0:
            continue
        p = torch.clamp(pred, BCE_EPS, 1.0 - BCE_EPS)
        bce = -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p))
        mask = keep[:, :, None, None].expand_as(bce)
        count = int(mask.sum())
        if count:
            total = total + stage.loss_weight * cfg.grid_loss_weight * bce[mask].sum() / count
    return total


def _predicted_sets(model: ToyHeatmapModel, batches: Sequence[StageBatch]) -> List[List[HeatmapSet]]:
    predicted = []
    for batch in batches:
        if not batch.boxes:
            predicted.append([])
            continue
        with torch.no_grad():
            values = model(torch.as_tensor(batch.inputs)).numpy()
        predicted.append([
            HeatmapSet(values=values[i], proposal=box, ratio=batch.ratio,
                       out_of_region=np.zeros(model.n_points, dtype=bool))
            for i, box in enumerate(batch.boxes)
        ])
    return predicted


class CmmObjective:
    """Staged BCE loss of a heatmap model as a function of its flat parameters.

    ``value`` evaluates ``cmm_loss`` on the model's predictions; ``gradient``
    pulls ``cmm_loss_gradient`` back through the model with ``toy_backward``.
    """

    def __init__(self, model: ToyHeatmapModel, batches: Sequence[StageBatch], cfg: CascadeConfig):
        self.model = model
        self.batches = list(batches)
        self.cfg = cfg
        self.targets = [b.targets for b in self.batches]

    def value(self, params: np.ndarray) -> float:
        set_flat_parameters(self.model, params)
        return cmm_loss(_predicted_sets(self.model, self.batches), self.targets, self.cfg)

    def gradient(self, params: np.ndarray) -> np.ndarray:
        set_flat_parameters(self.model, params)
        upstream = cmm_loss_gradient(_predicted_sets(self.model, self.batches), self.targets, self.cfg)
        grad = np.zeros(params.size, dtype=np.float64)
        for batch, stage_grads in zip(self.batches, upstream):
            if stage_grads:
                grad += toy_backward(self.model, batch.inputs, np.stack(stage_grads))
        return grad


class IsmObjective:
    """l2 ISM loss of a toy ISM as a function of its flat parameters."""

    def __init__(self, model: ToyScorer, features: np.ndarray, ious: np.ndarray):
        self.model = model
        self.features = features
        self.ious = ious

    def value(self, params: np.ndarray) -> float:
        set_flat_parameters(self.model, params)
        with torch.no_grad():
            out = self.model(torch.as_tensor(self.features)).numpy()
        return float(ism_loss(out[:, 0], out[:, 1], self.ious))

    def gradient(self, params: np.ndarray) -> np.ndarray:
        set_flat_parameters(self.model, params)
        with torch.no_grad():
            out = self.model(torch.as_tensor(self.features)).numpy()
        d_fg, d_bg = ism_loss_gradient(out[:, 0], out[:, 1], self.ious)
        return toy_backward(self.model, self.features, np.stack([d_fg, d_bg], axis=1))


def make_optimizer(parameters, kind: OptimizerKind, learning_rate: float) -> torch.optim.Optimizer:
    """Adam, or SGD with momentum 0.9 and weight decay 4e-5."""
    if OptimizerKind(kind) == OptimizerKind.SGD:
        return torch.optim.SGD(parameters, lr=learning_rate, momentum=SGD_MOMENTUM, weight_decay=SGD_WEIGHT_DECAY)
    return torch.optim.Adam(parameters, lr=learning_rate)


def _optimize(model: nn.Module, loss_fn: Callable[[], torch.Tensor], steps: int, kind: OptimizerKind,
              learning_rate: float, name: str) -> LossCurve:
    optimizer = make_optimizer(model.parameters(), kind, learning_rate)
    curve: LossCurve = []
    for step in range(steps + 1):
        optimizer.zero_grad()
        loss = loss_fn()
        if not torch.isfinite(loss):
            raise NonFiniteError(f"{name} loss became non-finite at step {step}", parameter_diagnostics(model))
        curve.append({"model": name, "step": step, "loss": float(loss)})
        if step == steps:
            break
        loss.backward()
        optimizer.step()
    logger.info(f"Trained {name}: loss {curve[0]['loss']:.4f} -> {curve[-1]['loss']:.4f} in {steps} steps")
    return curve


def train_heatmap_model(model: ToyHeatmapModel, batches: Sequence[StageBatch], cfg: CascadeConfig,
                        training: TrainingConfig) -> LossCurve:
    """Minimize the staged BCE loss over the oracle-driven batches.

    Returns:
        Loss curve; entry 0 is the loss at initialization
    """
    batches = [b for b in batches if b.boxes]
    if not batches:
        raise ValueError("No oracle-driven samples to train on")
    inputs = [torch.as_tensor(b.inputs) for b in batches]
    targets = [b.target_tensors() for b in batches]
    stages = [cfg.stages[b.stage] for b in batches]
    staged = cfg.model_copy(update={"stages": stages})

    def loss_fn() -> torch.Tensor:
        return cmm_loss_torch([model(x) for x in inputs], targets, staged)

    return _optimize(model, loss_fn, training.heatmap_steps, training.optimizer, training.learning_rate,
                     ToyHeatmapModel.kind)


class ScorerDataset(BaseModel):
    """Feature vectors of boxes with their true IoU.

    Attributes:
        features: (n, 40) re-pooled heatmap summaries
        ious: (n,) IoU with the best matching ground truth
        is_final: (n,) True for final cascade boxes, False for proposals
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    features: np.ndarray
    ious: np.ndarray
    is_final: np.ndarray

    def split(self, holdout_fraction: float, seed: int) -> Tuple["ScorerDataset", "ScorerDataset"]:
        """Seeded train/held-out split."""
        order = np.random.default_rng(seed).permutation(len(self.ious))
        n_hold = int(round(len(order) * holdout_fraction))
        parts = []
        for idx in (np.sort(order[n_hold:]), np.sort(order[:n_hold])):
            parts.append(ScorerDataset(features=self.features[idx], ious=self.ious[idx], is_final=self.is_final[idx]))
        return parts[0], parts[1]


def build_scorer_dataset(
    scenes: Sequence[Scene],
    proposals: Dict[int, List[BBox]],
    cfg: CascadeConfig,
    predictor: HeatmapPredictor,
    seed: int,
) -> ScorerDataset:
    """Run the cascade and re-pool features at proposals and final boxes.

    Features are pooled at the last stage's mapping ratio.
    """
    ratio = cfg.stages[-1].mapping_ratio
    pool_stage = len(cfg.stages)
    features, ious, is_final = [], [], []
    for scene in scenes:
        final, _ = run_cascade(cfg, proposals[scene.id], predictor, scene, seed)
        for final_flag, boxes in ((False, proposals[scene.id]), (True, final)):
            if not boxes:
                continue
            overlaps = np.zeros(len(boxes))
            if scene.gts:
                overlaps = pairwise_iou(boxes_to_array(boxes), boxes_to_array(scene.gt_boxes)).max(axis=1)
            for i, box in enumerate(boxes):
                box_seed = derive_seed(seed, scene.id, pool_stage, i, int(final_flag))
                features.append(pooled_features(predictor, scene, box, ratio, cfg.layout, box_seed).vector)
                ious.append(float(overlaps[i]))
                is_final.append(final_flag)
    return ScorerDataset(
        features=np.array(features).reshape(-1, 40),
        ious=np.array(ious),
        is_final=np.array(is_final, dtype=bool),
    )


def rsm_labels(dataset: ScorerDataset) -> Tuple[np.ndarray, np.ndarray]:
    """Resampling pools: final boxes with IoU >= 0.5 are positives, proposals below 0.5 are negatives.

    Returns:
        Indices into the dataset and 0/1 labels
    """
    positives = np.flatnonzero(dataset.is_final & (dataset.ious >= RSM_POSITIVE_IOU))
    negatives = np.flatnonzero(~dataset.is_final & (dataset.ious < RSM_POSITIVE_IOU))
    indices = np.concatenate([positives, negatives])
    labels = np.concatenate([np.ones(len(positives)), np.zeros(len(negatives))])
    return indices, labels


def train_ism_model(model: ToyScorer, features: np.ndarray, ious: np.ndarray, training: TrainingConfig,
                    loss_type: IsmLossType = IsmLossType.L2) -> LossCurve:
    """Regress (fg, bg) onto (IoU, 1 - IoU); marks the model trained."""
    x = torch.as_tensor(features)
    target = torch.as_tensor(ious)

    def loss_fn() -> torch.Tensor:
        out = model(x)
        return ism_loss(out[:, 0], out[:, 1], target, loss_type)

    curve = _optimize(model, loss_fn, training.scorer_steps, training.optimizer, training.scorer_learning_rate,
                      model.kind)
    model.trained = True
    return curve


def train_rsm_model(model: ToyScorer, features: np.ndarray, labels: np.ndarray, training: TrainingConfig) -> LossCurve:
    """Fit the resampled classifier with binary cross entropy; marks the model trained."""
    x = torch.as_tensor(features)
    y = torch.as_tensor(labels, dtype=torch.float64)

    def loss_fn() -> torch.Tensor:
        p = torch.clamp(model(x)[:, 0], BCE_EPS, 1.0 - BCE_EPS)
        return nn.functional.binary_cross_entropy(p, y)

    curve = _optimize(model, loss_fn, training.scorer_steps, training.optimizer, training.scorer_learning_rate,
                      model.kind)
    model.trained = True
    return curve


def scene_proposals(scenes: Sequence[Scene], params: ProposalParams, seed: int) -> Dict[int, List[BBox]]:
    """Proposals per scene id."""
    return {scene.id: generate_proposals(scene, params, seed) for scene in scenes}
