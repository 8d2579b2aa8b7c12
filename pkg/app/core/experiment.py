"""Experiment module for the point-guided cascade simulator.

This module contains the experiment runner that drives the whole detection
pipeline over a synthetic corpus, plus the ablation, gamma sweep, gradient
check and toy training entry points used by the CLI.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from app.api.schemas import AblationMatrix, ExperimentConfig, IsmMode, RsmMode
from app.core.cascade import run_cascade
from app.core.errors import ExperimentError
from app.core.evaluator import cap_rois, evaluate, match, nms, roc_auc
from app.core.scoring import (
    OracleIsm,
    OracleRsm,
    fused_score,
    ism_predict,
    pooled_features,
    rsm_predict,
    rsm_sample,
)
from app.learning.gradcheck import GradcheckReport, gradcheck
from app.learning.predictors import HeatmapPredictor, OraclePredictor
from app.learning.serialization import load_model, save_model
from app.learning.toy_models import (
    ToyHeatmapModel,
    ToyIsmModel,
    ToyPredictor,
    ToyRsmModel,
    get_flat_parameters,
)
from app.learning.training import (
    CmmObjective,
    IsmObjective,
    build_scorer_dataset,
    build_stage_batches,
    rsm_labels,
    scene_proposals,
    train_heatmap_model,
    train_ism_model,
    train_rsm_model,
)
from app.models.box import BBox, ImageBounds
from app.models.cascade import StageTrace
from app.models.detection import Detection, EvalResult, ScoreTriple
from app.models.predictor import PredictorConfig, PredictorKind
from app.models.scene import Scene
from app.utils.config import config_hash, resolve_workers, write_config
from app.utils.output import write_metrics, write_pr_curves, write_table
from app.utils.scene_generator import generate_corpus, generate_proposals, load_scenes, simulate_cls_confidence
from app.utils.seeding import derive_seed

logger = logging.getLogger(__name__)

# Seed namespaces; cascade stages use (seed, scene, stage, box) directly.
SEED_TAG_CLS = 1
SEED_TAG_POOL = 2

GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_COORDINATES = 100
GRADCHECK_SCENES = 2
GRADCHECK_SAMPLES = 4

HIT_IOU = 0.5
LOG_FLOOR = 1e-12


def _unit(value: float) -> float:
    return min(max(float(value), 0.0), 1.0)


def build_predictor(config: PredictorConfig) -> HeatmapPredictor:
    """Instantiate the configured heatmap predictor."""
    if config.kind == PredictorKind.TOY:
        model = load_model(config.model_path)
        if not isinstance(model, ToyHeatmapModel):
            raise ValueError(f"{config.model_path} holds a {model.kind} model, expected {ToyHeatmapModel.kind}")
        return ToyPredictor(model)
    return OraclePredictor(config.oracle)


def load_corpus(config: ExperimentConfig) -> List[Scene]:
    """Load the configured corpus file, or generate the synthetic corpus."""
    if config.corpus.path is not None:
        scenes = load_scenes(config.corpus.path)
        logger.info(f"Loaded {len(scenes)} scenes from {config.corpus.path}")
        return scenes
    corpus = config.corpus
    return generate_corpus(
        config.seed,
        corpus.n_scenes,
        ImageBounds(width=corpus.width, height=corpus.height),
        corpus.n_objects,
        corpus.truncated_fraction,
        corpus.size_mix,
    )


class SceneOutput(BaseModel):
    """Everything the pipeline produced for one scene before final NMS.

    Attributes:
        scene: The scene
        scores: Score triple per cascade box
        traces: Cascade trace per stage
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    scene: Scene
    scores: List[ScoreTriple]
    traces: List[StageTrace]

    def detections(self, gamma: float, stage: Optional[int] = None) -> List[Detection]:
        """Fused-score detections built from a stage's boxes (default: the last)."""
        if not self.traces:
            return []
        boxes = self.traces[-1 if stage is None else stage].output_boxes
        return [
            Detection(box=box, scores=triple, fused=fused_score(triple, gamma), scene_id=self.scene.id, index=i)
            for i, (box, triple) in enumerate(zip(boxes, self.scores))
        ]


class ExperimentResult(BaseModel):
    """Metrics and per-stage summary of one run."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    eval_result: EvalResult
    stage_rows: List[Dict]
    outputs: List[SceneOutput]


class ExperimentRunner:
    """Runs the detection pipeline for one configuration.

    Corpus -> proposals -> proposal-time confidence -> NMS + RoI cap ->
    cascade -> ISM/RSM -> fused score -> final NMS -> evaluation.
    """

    def __init__(self, config: ExperimentConfig, workers: Optional[int] = None):
        """Initialize the runner with its predictor and scorers.

        Args:
            config: Validated experiment configuration
            workers: Scene-level worker threads; defaults to the configured count
        """
        self.config = config
        self.workers = workers or resolve_workers(config)
        self.predictor = build_predictor(config.predictor)
        self.ism_model = self._load_scorer(config.scoring.ism == IsmMode.TOY, config.scoring.ism_model_path, ToyIsmModel)
        self.rsm_model = self._load_scorer(config.scoring.rsm == RsmMode.TOY, config.scoring.rsm_model_path, ToyRsmModel)
        reference = "full_extent" if config.scoring.ism == IsmMode.ORACLE_FULL_EXTENT else "visible"
        self.oracle_ism = OracleIsm(reference=reference)
        self.oracle_rsm = OracleRsm()
        self.hash = config_hash(config)

    @staticmethod
    def _load_scorer(enabled: bool, path: Optional[str], expected: type):
        if not enabled:
            return None
        model = load_model(path)
        if not isinstance(model, expected):
            raise ValueError(f"{path} holds a {model.kind} model, expected {expected.kind}")
        return model

    def _proposal_detections(self, scene: Scene) -> List[Detection]:
        cfg = self.config
        proposals = generate_proposals(scene, cfg.proposals, cfg.seed)
        dets = []
        for i, box in enumerate(proposals):
            conf = simulate_cls_confidence(box, scene, cfg.cls.decorrelation, derive_seed(cfg.seed, SEED_TAG_CLS, scene.id, i))
            dets.append(Detection(box=box, scores=ScoreTriple(score_cls=conf), fused=conf, scene_id=scene.id, index=i))
        return cap_rois(nms(dets, cfg.nms.pre_threshold), cfg.nms.max_rois)

    def _score(self, scene: Scene, index: int, box: BBox, score_cls: float) -> ScoreTriple:
        scoring = self.config.scoring
        features = None
        if self.ism_model is not None or self.rsm_model is not None:
            ratio = self.config.cascade.stages[-1].mapping_ratio
            seed = derive_seed(self.config.seed, SEED_TAG_POOL, scene.id, index)
            features = pooled_features(self.predictor, scene, box, ratio, self.config.cascade.layout, seed)

        if scoring.ism == IsmMode.OFF:
            score_ism = 1.0
        elif self.ism_model is not None:
            score_ism = ism_predict(features, self.ism_model)[0]
        else:
            score_ism = self.oracle_ism.predict(box, scene)[0]

        if scoring.rsm == RsmMode.OFF:
            score_rsm = 1.0
        elif self.rsm_model is not None:
            score_rsm = rsm_predict(box, features, self.rsm_model)
        else:
            score_rsm = self.oracle_rsm.predict(box, scene)
        return ScoreTriple(score_cls=score_cls, score_ism=_unit(score_ism), score_rsm=_unit(score_rsm))

    def process_scene(self, scene: Scene) -> SceneOutput:
        """Run one scene up to (not including) final NMS.

        Raises:
            ExperimentError: Naming the scene (and stage, when known) of a failure
        """
        try:
            proposals = self._proposal_detections(scene)
        except Exception as e:
            raise ExperimentError(f"proposal stage failed: {e}", scene_id=scene.id) from e
        try:
            final, traces = run_cascade(self.config.cascade, [d.box for d in proposals], self.predictor, scene,
                                        self.config.seed)
        except ExperimentError:
            raise
        except Exception as e:
            raise ExperimentError(f"cascade failed: {e}", scene_id=scene.id) from e
        last_stage = len(self.config.cascade.stages) - 1
        try:
            scores = [self._score(scene, i, box, d.scores.score_cls) for i, (box, d) in enumerate(zip(final, proposals))]
        except Exception as e:
            raise ExperimentError(f"scoring failed: {e}", scene_id=scene.id, stage=last_stage) from e
        return SceneOutput(scene=scene, scores=scores, traces=traces)

    def process(self, scenes: Sequence[Scene]) -> List[SceneOutput]:
        """Process scenes with a fixed worker pool; results stay in scene order."""
        if self.workers > 1 and len(scenes) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                return list(pool.map(self.process_scene, scenes))
        return [self.process_scene(scene) for scene in scenes]

    def evaluate_outputs(self, outputs: Sequence[SceneOutput], gamma: Optional[float] = None,
                         stage: Optional[int] = None) -> EvalResult:
        """Fuse, apply final NMS and evaluate, optionally at another gamma or stage."""
        cfg = self.config
        gamma = cfg.scoring.gamma if gamma is None else gamma
        dets_by_scene = {
            out.scene.id: nms(out.detections(gamma, stage), cfg.nms.final_threshold) for out in outputs
        }
        gts_by_scene = {out.scene.id: out.scene.gt_boxes for out in outputs}
        return evaluate(dets_by_scene, gts_by_scene, cfg.evaluation.thresholds, cfg.evaluation.scale_bins)

    def stage_rows(self, outputs: Sequence[SceneOutput]) -> List[Dict]:
        """Per-stage summary: flagged count, mean IoU of refined boxes, AP with the final scores."""
        rows = []
        for j, stage in enumerate(self.config.cascade.stages):
            ious: List[float] = []
            flagged = 0
            n_boxes = 0
            for out in outputs:
                trace = out.traces[j]
                n_boxes += len(trace.output_boxes)
                flagged += sum(trace.passthrough)
                if trace.ious is not None:
                    ious.extend(v for v, f in zip(trace.ious, trace.passthrough) if not f)
            result = self.evaluate_outputs(outputs, stage=j)
            rows.append({
                "stage": j,
                "mapping_ratio": stage.mapping_ratio,
                "n_boxes": n_boxes,
                "n_flagged": flagged,
                "mean_iou": float(np.mean(ious)) if ious else float("nan"),
                "ap": result.ap,
                "ap90": result.ap_at["0.90"],
            })
        return rows

    def run(self, scenes: Optional[Sequence[Scene]] = None) -> ExperimentResult:
        """Run the pipeline end to end."""
        scenes = list(scenes) if scenes is not None else load_corpus(self.config)
        outputs = self.process(scenes)
        result = self.evaluate_outputs(outputs)
        logger.info(f"Run {self.hash}: AP={result.ap:.4f} AP50={result.ap50:.4f} AP75={result.ap75:.4f}")
        return ExperimentResult(eval_result=result, stage_rows=self.stage_rows(outputs), outputs=outputs)

    def truncation_stats(self, outputs: Sequence[SceneOutput], gamma: Optional[float] = None) -> Dict[str, float]:
        """Where hits on border-truncated objects land in the pooled final ranking.

        Hits are the true positives of one-to-one matching at IoU 0.5 against
        the visible ground truth; a hit is truncated when its ground truth is.

        Returns:
            n_truncated_hits; truncated_rank, the mean percentile of truncated
            hits (0 = top); truncated_gap, their mean log fused score minus that
            of the other hits (NaN when either group is empty)
        """
        gamma = self.config.scoring.gamma if gamma is None else gamma
        pooled = []
        for out in outputs:
            gts = out.scene.gts
            dets = nms(out.detections(gamma), self.config.nms.final_threshold)
            if not dets:
                continue
            dets = sorted(dets, key=lambda d: (-d.fused, d.index))
            result = match(dets, out.scene.gt_boxes, HIT_IOU)
            for det, hit, g in zip(dets, result.tp, result.matched_gt):
                pooled.append((det, hit, hit and gts[g].truncated))
        pooled.sort(key=lambda item: (-item[0].fused, item[0].scene_id, item[0].index))

        scale = max(len(pooled) - 1, 1)
        ranks = [k / scale for k, (_, _, truncated) in enumerate(pooled) if truncated]
        log_truncated = [math.log(max(d.fused, LOG_FLOOR)) for d, _, truncated in pooled if truncated]
        log_other = [math.log(max(d.fused, LOG_FLOOR)) for d, hit, truncated in pooled if hit and not truncated]
        gap = float(np.mean(log_truncated) - np.mean(log_other)) if log_truncated and log_other else math.nan
        return {
            "n_truncated_hits": len(ranks),
            "truncated_rank": float(np.mean(ranks)) if ranks else math.nan,
            "truncated_gap": gap,
        }

    def gamma_sweep(self, outputs: Sequence[SceneOutput], gammas: Sequence[float]) -> List[Dict]:
        """Re-rank the same boxes at several gammas."""
        rows = []
        for gamma in gammas:
            result = self.evaluate_outputs(outputs, gamma=gamma)
            rows.append({"gamma": gamma, "ap": result.ap, "ap50": result.ap50, "ap75": result.ap75,
                         "ap90": result.ap_at["0.90"], **self.truncation_stats(outputs, gamma)})
        return rows


def run_experiment(config: ExperimentConfig, gammas: Sequence[float] = (),
                   scenes: Optional[Sequence[Scene]] = None) -> ExperimentResult:
    """Run one experiment and write its artifacts into ``config.output_dir``.

    Writes metrics.csv, metrics.json, pr_curves.csv, stage_trace.csv and
    config.yaml, plus gamma_sweep.csv when gammas are given.
    """
    runner = ExperimentRunner(config)
    result = runner.run(scenes)
    out = Path(config.output_dir)
    write_config(config, out)
    write_metrics(result.eval_result, out, runner.hash, config.seed)
    write_pr_curves(result.eval_result, out, runner.hash, config.seed)
    write_table(result.stage_rows, out / "stage_trace.csv", runner.hash, config.seed)
    if gammas:
        write_table(runner.gamma_sweep(result.outputs, gammas), out / "gamma_sweep.csv", runner.hash, config.seed)
    return result


ABLATION_METRICS = ("ap", "ap50", "ap75", "ap90", "ap_small", "ap_medium", "ap_large")


def _metric_row(result: EvalResult) -> Dict[str, float]:
    return {
        "ap": result.ap,
        "ap50": result.ap50,
        "ap75": result.ap75,
        "ap90": result.ap_at["0.90"],
        "ap_small": result.ap_small,
        "ap_medium": result.ap_medium,
        "ap_large": result.ap_large,
    }


def run_ablation(
    base: ExperimentConfig,
    matrix: Optional[AblationMatrix] = None,
    seeds: Optional[Sequence[int]] = None,
) -> pd.DataFrame:
    """Run every matrix row (for every seed) and write ablation.csv.

    A failing row is recorded with its error and NaN metrics; other rows
    proceed. With several seeds, ablation_mean.csv holds per-row means.

    Returns:
        The ablation table
    """
    matrix = matrix or AblationMatrix()
    seeds = list(seeds) if seeds else [base.seed]
    rows = []
    for seed in seeds:
        seeded = base.model_copy(update={"seed": seed})
        for row in matrix.rows:
            record = {"row": row.name, "cmm": row.cmm, "ism": row.ism, "rsm": row.rsm, "run_seed": seed}
            try:
                result = ExperimentRunner(row.apply(seeded)).run()
                record.update(_metric_row(result.eval_result), status="ok", error="")
            except Exception as e:  # noqa: BLE001
                logger.warning(f"Ablation row {row.name} (seed {seed}) failed: {e}")
                record.update({m: math.nan for m in ABLATION_METRICS}, status="failed", error=str(e))
            rows.append(record)

    table = pd.DataFrame(rows)
    out = Path(base.output_dir)
    digest = config_hash(base)
    write_config(base, out)
    write_table(table.to_dict("records"), out / "ablation.csv", digest, base.seed)
    if len(seeds) > 1:
        means = (
            table.groupby(["row", "cmm", "ism", "rsm"], sort=False)[list(ABLATION_METRICS)]
            .mean()
            .reset_index()
        )
        write_table(means.to_dict("records"), out / "ablation_mean.csv", digest, base.seed)
    return table


def _training_data(config: ExperimentConfig, n_scenes: int = GRADCHECK_SCENES):
    corpus = config.corpus.model_copy(update={"n_scenes": n_scenes, "path": None})
    scenes = load_corpus(config.model_copy(update={"corpus": corpus}))
    proposals = scene_proposals(scenes, config.proposals, config.seed)
    return scenes, proposals


def run_gradcheck(config: ExperimentConfig, corrupt: bool = False) -> Dict[str, GradcheckReport]:
    """Check the cmm_loss and ism_loss gradients of fresh toy models.

    Writes gradcheck.csv; ``corrupt`` doubles the largest analytic coordinate.
    """
    scenes, proposals = _training_data(config)
    layout = config.cascade.layout
    heatmap_model = ToyHeatmapModel(resolution=layout.resolution, hidden=config.training.hidden, seed=config.seed)
    batches = build_stage_batches(scenes, proposals, config.cascade, config.seed, GRADCHECK_SAMPLES)
    cmm = CmmObjective(heatmap_model, batches, config.cascade)

    ism_model = ToyIsmModel(seed=config.seed)
    dataset = build_scorer_dataset(scenes, proposals, config.cascade, build_predictor(config.predictor), config.seed)
    ism = IsmObjective(ism_model, dataset.features, dataset.ious)

    reports = {
        "cmm_loss": gradcheck(cmm.value, cmm.gradient, get_flat_parameters(heatmap_model), GRADCHECK_TOLERANCE,
                              GRADCHECK_COORDINATES, seed=config.seed, corrupt=corrupt),
        "ism_loss": gradcheck(ism.value, ism.gradient, get_flat_parameters(ism_model), GRADCHECK_TOLERANCE,
                              GRADCHECK_COORDINATES, seed=config.seed, corrupt=corrupt),
    }
    rows = [{"check": name, **report.model_dump()} for name, report in reports.items()]
    write_table(rows, Path(config.output_dir) / "gradcheck.csv", config_hash(config), config.seed)
    return reports


def train_toys(config: ExperimentConfig) -> Dict[str, Path]:
    """Train the toy heatmap model, ISM and RSM; write model JSON and loss curves.

    Returns:
        Written file paths by name
    """
    training = config.training
    out = Path(config.output_dir)
    digest = config_hash(config)
    scenes, proposals = _training_data(config, training.n_scenes)

    layout = config.cascade.layout
    heatmap_model = ToyHeatmapModel(resolution=layout.resolution, hidden=training.hidden, seed=config.seed)
    batches = build_stage_batches(scenes, proposals, config.cascade, config.seed, training.max_samples_per_stage)
    curves = train_heatmap_model(heatmap_model, batches, config.cascade, training)

    dataset = build_scorer_dataset(scenes, proposals, config.cascade, build_predictor(config.predictor), config.seed)
    train_set, held_out = dataset.split(training.holdout_fraction, derive_seed(config.seed, SEED_TAG_POOL))

    ism_model = ToyIsmModel(seed=config.seed)
    curves += train_ism_model(ism_model, train_set.features, train_set.ious, training, config.scoring.ism_loss)

    indices, labels = rsm_labels(train_set)
    positives = [i for i, y in zip(indices, labels) if y == 1]
    negatives = [i for i, y in zip(indices, labels) if y == 0]
    sampled, sampled_labels = rsm_sample(positives, negatives, config.seed)
    rsm_model = ToyRsmModel(seed=config.seed)
    curves += train_rsm_model(rsm_model, train_set.features[np.array(sampled, dtype=int)], sampled_labels, training)

    summary = [
        {"model": ToyHeatmapModel.kind, "metric": "loss_ratio", "value": curves_ratio(curves, ToyHeatmapModel.kind)},
    ]
    if len(held_out.ious):
        fg = ism_model.predict(held_out.features)[:, 0]
        summary.append({"model": ToyIsmModel.kind, "metric": "heldout_mae",
                        "value": float(np.mean(np.abs(fg - held_out.ious)))})
        hold_idx, hold_labels = rsm_labels(held_out)
        if 0 < hold_labels.sum() < len(hold_labels):
            scores = rsm_model.predict(held_out.features[hold_idx])[:, 0]
            summary.append({"model": ToyRsmModel.kind, "metric": "heldout_auc", "value": roc_auc(scores, hold_labels)})
    for item in summary:
        logger.info(f"{item['model']}: {item['metric']} = {item['value']:.4f}")

    paths = {
        "toy_heatmap": save_model(heatmap_model, out / "toy_heatmap.json"),
        "toy_ism": save_model(ism_model, out / "toy_ism.json"),
        "toy_rsm": save_model(rsm_model, out / "toy_rsm.json"),
        "loss_curves": write_table(curves, out / "loss_curves.csv", digest, config.seed),
        "training_summary": write_table(summary, out / "training_summary.csv", digest, config.seed),
        "config": write_config(config, out),
    }
    return paths


def curves_ratio(curves: Sequence[Dict], name: str) -> float:
    """Final over initial loss of one model's curve."""
    losses = [c["loss"] for c in curves if c["model"] == name]
    return losses[-1] / losses[0] if losses and losses[0] > 0 else float("nan")
