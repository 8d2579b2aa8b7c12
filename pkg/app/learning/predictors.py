"""Heatmap predictors for the point-guided cascade simulator.

This module contains the predictor interface standing in for the grid branch
and the ground-truth oracle that models the RoI-limited heatmap problem.
"""

import logging
from typing import Protocol

import numpy as np

from app.core.geometry import boxes_to_array, pairwise_iou
from app.core.grid_codec import cell_index, in_region, points_to_cells, represented_region
from app.models.box import BBox
from app.models.heatmap import GridLayout, HeatmapSet
from app.models.predictor import OracleParams
from app.models.scene import Scene

logger = logging.getLogger(__name__)

ORACLE_MATCH_IOU = 0.3


class HeatmapPredictor(Protocol):
    """Maps (scene, box, ratio) to heatmaps over expand(box, ratio).

    Implementations must be deterministic given their inputs and the seed.
    """

    def predict(self, scene: Scene, box: BBox, ratio: float, layout: GridLayout, seed: int) -> HeatmapSet: ...


class OraclePredictor:
    """Renders heatmaps from the matched ground truth.

    Boxes with no ground truth at IoU >= 0.3 get flat background maps.
    Ground-truth points outside the represented region are clamped onto the
    border cell when ``truncate`` is set, the way RoI-bound features cannot
    see past the RoI; otherwise their channel stays flat.
    """

    def __init__(self, params: OracleParams):
        """Initialize the oracle.

        Args:
            params: Noise, truncation and rendering settings
        """
        self.params = params

    def predict(self, scene: Scene, box: BBox, ratio: float, layout: GridLayout, seed: int) -> HeatmapSet:
        size = layout.resolution
        background = self.params.background_level
        values = np.full((layout.n_points, size, size), background, dtype=np.float64)
        flags = np.zeros(layout.n_points, dtype=bool)

        represented_region(box, ratio)
        if scene.gts:
            overlaps = pairwise_iou(boxes_to_array([box]), boxes_to_array(scene.gt_boxes))[0]
            match = int(np.argmax(overlaps))
            best = float(overlaps[match])
        else:
            match, best = -1, 0.0
        if best < ORACLE_MATCH_IOU:
            return HeatmapSet(values=values, proposal=box, ratio=ratio, out_of_region=flags)

        rng = np.random.default_rng(seed)
        noise = rng.normal(0.0, 1.0, size=(layout.n_points, 2)) * self.params.noise_sigma
        cells = points_to_cells(layout.grid_points(scene.gts[match].box), box, ratio, size)
        rows, cols = np.indices((size, size))
        for k, (u, v) in enumerate(cells):
            if not in_region(u, v, size):
                if not self.params.truncate:
                    continue
                u, v = np.clip(u, 0.0, size), np.clip(v, 0.0, size)
            u = float(np.clip(u + noise[k, 0], 0.0, size))
            v = float(np.clip(v + noise[k, 1], 0.0, size))
            peak_row, peak_col = cell_index(v, size), cell_index(u, size)
            distance = np.sqrt((rows - peak_row) ** 2 + (cols - peak_col) ** 2)
            values[k] = np.maximum(background, np.exp(-self.params.peak_decay * distance))
        return HeatmapSet(values=values, proposal=box, ratio=ratio, out_of_region=flags)


def oracle_predict(scene: Scene, box: BBox, ratio: float, params: OracleParams, seed: int,
                   layout: GridLayout = GridLayout()) -> HeatmapSet:
    """Functional form of ``OraclePredictor.predict``."""
    return OraclePredictor(params).predict(scene, box, ratio, layout, seed)
