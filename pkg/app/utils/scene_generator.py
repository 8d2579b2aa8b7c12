"""Utility module for generating synthetic scenes and proposals."""

import logging
import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from app.core.errors import ProposalGenerationError, SchemaVersionError
from app.core.geometry import boxes_to_array, clip, max_iou, pairwise_iou
from app.core.scoring import calibrated_confidence
from app.models.box import BBox, ImageBounds
from app.models.scene import CorpusHeader, GroundTruth, ProposalParams, Scene, SceneCorpus, SceneRecord, SizeMix
from app.utils.seeding import derive_seed

logger = logging.getLogger(__name__)

SCENE_SCHEMA_VERSION = 1

# Side-length ranges per COCO area bin (area < 32^2, 32^2..96^2, > 96^2).
SMALL_SIDE = (12.0, 32.0)
MEDIUM_SIDE = (32.0, 96.0)
LARGE_SIDE_MIN = 96.0
LARGE_SIDE_CAP = 320.0
MAX_ASPECT = 2.0

BACKGROUND_MAX_IOU = 0.3
BACKGROUND_ATTEMPTS_PER_BOX = 200


def _side_ranges(bounds: ImageBounds, size_mix: SizeMix) -> List[Tuple[float, float]]:
    short_side = min(bounds.width, bounds.height)
    large_max = min(0.6 * short_side, LARGE_SIDE_CAP)
    ranges = [SMALL_SIDE, MEDIUM_SIDE, (LARGE_SIDE_MIN, large_max)]
    names = ("small", "medium", "large")
    for name, (lo, hi), weight in zip(names, ranges, size_mix.probabilities()):
        if weight <= 0:
            continue
        if hi <= lo * 1.05 or hi * math.sqrt(MAX_ASPECT) > short_side:
            raise ValueError(
                f"Infeasible size_mix: {name} objects do not fit a {bounds.width}x{bounds.height} image"
            )
    return ranges


def generate_scene(
    seed: int,
    bounds: ImageBounds,
    n_objects: int,
    truncated_fraction: float,
    size_mix: Optional[SizeMix] = None,
    scene_id: int = 0,
) -> Scene:
    """Generate one synthetic scene.

    Object areas are drawn uniformly inside their S/M/L bin; truncated
    objects are placed partly outside the image and clipped.

    Args:
        seed: Random seed
        bounds: Image extent
        n_objects: Number of ground-truth objects
        truncated_fraction: Probability that an object crosses the border
        size_mix: Relative frequency of small/medium/large objects
        scene_id: Identifier stored in the scene

    Returns:
        Scene with ground truth, no pixels

    Raises:
        ValueError: If the parameters are out of range or objects cannot fit
    """
    if n_objects < 0:
        raise ValueError(f"n_objects must be >= 0, got {n_objects}")
    if not 0.0 <= truncated_fraction <= 1.0:
        raise ValueError(f"truncated_fraction must be in [0, 1], got {truncated_fraction}")
    size_mix = size_mix or SizeMix()
    ranges = _side_ranges(bounds, size_mix)
    rng = np.random.default_rng(seed)

    gts = []
    for _ in range(n_objects):
        bin_index = int(rng.choice(3, p=size_mix.probabilities()))
        lo, hi = ranges[bin_index]
        side = math.sqrt(rng.uniform(lo * lo, hi * hi))
        aspect = math.exp(rng.uniform(-math.log(MAX_ASPECT), math.log(MAX_ASPECT)))
        w, h = side * math.sqrt(aspect), side / math.sqrt(aspect)
        truncated = bool(rng.random() < truncated_fraction)

        x1 = rng.uniform(0.0, bounds.width - w)
        y1 = rng.uniform(0.0, bounds.height - h)
        if truncated:
            # Push the object across one border, keeping at least half of it visible.
            edge = int(rng.integers(4))
            overhang = rng.uniform(0.1, 0.5)
            if edge == 0:
                x1 = -overhang * w
            elif edge == 1:
                x1 = bounds.width - (1.0 - overhang) * w
            elif edge == 2:
                y1 = -overhang * h
            else:
                y1 = bounds.height - (1.0 - overhang) * h
        full = BBox(x1=x1, y1=y1, x2=x1 + w, y2=y1 + h)
        visible = clip(full, bounds)
        gts.append(GroundTruth(
            box=visible,
            truncated=truncated,
            full_extent=full if truncated else visible,
        ))

    return Scene(id=scene_id, bounds=bounds, gts=gts)


def generate_corpus(
    seed: int,
    n_scenes: int,
    bounds: ImageBounds,
    n_objects: int,
    truncated_fraction: float,
    size_mix: Optional[SizeMix] = None,
) -> List[Scene]:
    """Generate scenes 0..n_scenes-1, each from a seed derived from (seed, scene id)."""
    scenes = [
        generate_scene(derive_seed(seed, i), bounds, n_objects, truncated_fraction, size_mix, scene_id=i)
        for i in range(n_scenes)
    ]
    logger.info(f"Generated corpus of {len(scenes)} scenes (seed={seed})")
    return scenes


def _jitter(box: BBox, sigma: float, rng: np.random.Generator) -> Tuple[float, float, float, float]:
    dx = rng.normal(0.0, sigma) * box.width
    dy = rng.normal(0.0, sigma) * box.height
    grow_w = (math.exp(rng.normal(0.0, sigma)) - 1.0) * box.width / 2.0
    grow_h = (math.exp(rng.normal(0.0, sigma)) - 1.0) * box.height / 2.0
    return (box.x1 + dx - grow_w, box.y1 + dy - grow_h, box.x2 + dx + grow_w, box.y2 + dy + grow_h)


def _snap(coords: Tuple[float, float, float, float], quantization: float) -> Tuple[float, float, float, float]:
    x1, y1, x2, y2 = coords

    def snapped(length: float) -> float:
        steps = round(math.log(max(length, 1e-6) / 16.0) / math.log(quantization))
        return 16.0 * quantization ** steps

    pad_w = (snapped(x2 - x1) - (x2 - x1)) / 2.0
    pad_h = (snapped(y2 - y1) - (y2 - y1)) / 2.0
    return (x1 - pad_w, y1 - pad_h, x2 + pad_w, y2 + pad_h)


def generate_proposals(scene: Scene, params: ProposalParams, seed: Optional[int] = None) -> List[BBox]:
    """Generate RPN-like proposals for a scene.

    Each ground truth gets ``per_object`` jittered copies (sizes optionally
    snapped to anchor-like scales), clipped to the image; then
    ``n_background`` boxes with IoU < 0.3 against every ground truth.

    Args:
        scene: Scene to propose for
        params: Proposal settings
        seed: Seed used when params.seed is None

    Returns:
        Proposals: jittered copies in ground-truth order, then background boxes

    Raises:
        ProposalGenerationError: If background sampling exhausts its retries
    """
    base_seed = params.seed if params.seed is not None else (seed if seed is not None else 0)
    rng = np.random.default_rng(derive_seed(base_seed, scene.id))
    bounds = scene.bounds
    proposals: List[BBox] = []

    for gt in scene.gts:
        for _ in range(params.per_object):
            for _attempt in range(10):
                coords = _jitter(gt.box, params.jitter_sigma, rng)
                if params.scale_quantization is not None:
                    coords = _snap(coords, params.scale_quantization)
                x1, y1, x2, y2 = coords
                box = clip(BBox(x1=min(x1, x2), y1=min(y1, y2), x2=max(x1, x2), y2=max(y1, y2)), bounds)
                if box.area > 0:
                    proposals.append(box)
                    break
            else:
                logger.warning(f"Scene {scene.id}: dropped a jittered proposal that left the image")

    gt_array = boxes_to_array(scene.gt_boxes)
    budget = BACKGROUND_ATTEMPTS_PER_BOX * max(params.n_background, 1)
    attempts = 0
    accepted = 0
    while accepted < params.n_background:
        if attempts >= budget:
            raise ProposalGenerationError(
                f"Scene {scene.id}: accepted {accepted}/{params.n_background} background proposals "
                f"after {attempts} attempts (max IoU must stay below {BACKGROUND_MAX_IOU})"
            )
        attempts += 1
        side = math.sqrt(rng.uniform(SMALL_SIDE[1] ** 2, MEDIUM_SIDE[1] ** 2))
        aspect = math.exp(rng.uniform(-math.log(MAX_ASPECT), math.log(MAX_ASPECT)))
        w = min(side * math.sqrt(aspect), bounds.width)
        h = min(side / math.sqrt(aspect), bounds.height)
        x1 = rng.uniform(0.0, bounds.width - w)
        y1 = rng.uniform(0.0, bounds.height - h)
        box = clip(BBox(x1=x1, y1=y1, x2=x1 + w, y2=y1 + h), bounds)
        if box.area <= 0:
            continue
        if gt_array.shape[0] and pairwise_iou(boxes_to_array([box]), gt_array).max() >= BACKGROUND_MAX_IOU:
            continue
        proposals.append(box)
        accepted += 1

    logger.debug(f"Scene {scene.id}: {len(proposals)} proposals ({accepted} background)")
    return proposals


def simulate_cls_confidence(proposal: BBox, scene: Scene, decorrelation: float, seed: int) -> float:
    """Classification confidence computed on the proposal, not on the refined box.

    Args:
        proposal: Proposal the classifier saw
        scene: Scene with ground truth
        decorrelation: Mixture weight of seeded uniform noise, in [0, 1]
        seed: Seed of the noise draw

    Returns:
        Confidence in [0, 1]
    """
    if not 0.0 <= decorrelation <= 1.0:
        raise ValueError(f"decorrelation must be in [0, 1], got {decorrelation}")
    base = calibrated_confidence(max_iou(proposal, scene.gt_boxes))
    noise = float(np.random.default_rng(seed).random())
    return (1.0 - decorrelation) * base + decorrelation * noise


def save_scenes(scenes: Sequence[Scene], path: Union[str, Path]) -> Path:
    """Write a scene corpus as versioned JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = SceneCorpus(version=SCENE_SCHEMA_VERSION, scenes=[SceneRecord.from_scene(s) for s in scenes])
    path.write_text(document.model_dump_json(indent=2, by_alias=True) + "\n", encoding="utf-8")
    logger.info(f"Saved {len(scenes)} scenes to {path}")
    return path


def load_scenes(path: Union[str, Path]) -> List[Scene]:
    """Read a scene corpus written by ``save_scenes``.

    Raises:
        SchemaVersionError: If the document version is not supported
        ValueError: If the file is not a valid corpus document
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        header = CorpusHeader.model_validate_json(text)
    except ValidationError as e:
        raise ValueError(f"Malformed scene corpus {path}: {e}") from e
    if header.version != SCENE_SCHEMA_VERSION:
        raise SchemaVersionError("scene corpus", SCENE_SCHEMA_VERSION, header.version)
    try:
        return [record.to_scene() for record in SceneCorpus.model_validate_json(text).scenes]
    except ValidationError as e:
        raise ValueError(f"Malformed scene corpus {path}: {e}") from e
