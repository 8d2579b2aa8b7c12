"""Shared fixtures for the simulator tests."""

import pytest

from app.models.box import BBox, ImageBounds
from app.models.predictor import OracleParams
from app.models.scene import GroundTruth, Scene


def make_scene(boxes, scene_id=0, width=200.0, height=200.0):
    """Scene with complete (untruncated) objects at the given xyxy boxes."""
    return Scene(
        id=scene_id,
        bounds=ImageBounds(width=width, height=height),
        gts=[GroundTruth(box=BBox.from_xyxy(b)) for b in boxes],
    )


@pytest.fixture
def single_object_scene():
    return make_scene([(60, 60, 140, 120)])


@pytest.fixture
def exact_params():
    return OracleParams(noise_sigma=0.0, truncate=False)
