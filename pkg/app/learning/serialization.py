"""Versioned JSON files for trained toy models.

Document layout::

    {"format_version": 1, "kind": "toy_heatmap" | "toy_ism" | "toy_rsm",
     "config": {...}, "parameters": [{"name", "shape", "values"}, ...]}
"""

import json
import logging
from pathlib import Path
from typing import Dict, Union

import numpy as np
import torch
from torch import nn

from app.core.errors import SchemaVersionError
from app.learning.toy_models import ToyHeatmapModel, ToyIsmModel, ToyRsmModel

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1

ToyModel = Union[ToyHeatmapModel, ToyIsmModel, ToyRsmModel]

_BUILDERS = {
    ToyHeatmapModel.kind: lambda cfg: ToyHeatmapModel(
        resolution=int(cfg["resolution"]), n_points=int(cfg["n_points"]),
        hidden=int(cfg["hidden"]), seed=int(cfg["seed"]),
    ),
    ToyIsmModel.kind: lambda cfg: ToyIsmModel(seed=int(cfg["seed"]), trained=bool(cfg["trained"])),
    ToyRsmModel.kind: lambda cfg: ToyRsmModel(seed=int(cfg["seed"]), trained=bool(cfg["trained"])),
}


def model_to_dict(model: ToyModel) -> Dict:
    """Build the JSON document of a toy model."""
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "kind": model.kind,
        "config": model.config(),
        "parameters": [
            {"name": name, "shape": list(p.shape), "values": p.detach().reshape(-1).tolist()}
            for name, p in model.named_parameters()
        ],
    }


def model_from_dict(document: Dict) -> ToyModel:
    """Rebuild a toy model from its JSON document.

    Raises:
        SchemaVersionError: If the format version is not supported
        ValueError: If the document is malformed or parameters do not fit
    """
    if not isinstance(document, dict) or "format_version" not in document:
        raise ValueError("Malformed model document: missing 'format_version'")
    if document["format_version"] != MODEL_FORMAT_VERSION:
        raise SchemaVersionError("model document", MODEL_FORMAT_VERSION, document["format_version"])
    kind = document.get("kind")
    if kind not in _BUILDERS:
        raise ValueError(f"Unknown model kind: {kind!r}")
    try:
        model = _BUILDERS[kind](document["config"])
        stored = {item["name"]: item for item in document["parameters"]}
    except (KeyError, TypeError) as e:
        raise ValueError(f"Malformed model document: {e!r}") from e

    with torch.no_grad():
        for name, param in model.named_parameters():
            if name not in stored:
                raise ValueError(f"Model document lacks parameter {name}")
            item = stored[name]
            if list(item["shape"]) != list(param.shape):
                raise ValueError(f"Parameter {name}: shape {item['shape']} does not match {list(param.shape)}")
            values = np.asarray(item["values"], dtype=np.float64).reshape(param.shape)
            if not np.all(np.isfinite(values)):
                raise ValueError(f"Parameter {name} holds non-finite values")
            param.copy_(torch.as_tensor(values))
    extra = set(stored) - {name for name, _ in model.named_parameters()}
    if extra:
        raise ValueError(f"Model document has unknown parameters: {sorted(extra)}")
    return model


def save_model(model: nn.Module, path: Union[str, Path]) -> Path:
    """Write a toy model as versioned JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(model_to_dict(model)) + "\n", encoding="utf-8")
    logger.info(f"Saved {model.kind} model to {path}")
    return path


def load_model(path: Union[str, Path]) -> ToyModel:
    """Read a toy model written by ``save_model``."""
    path = Path(path)
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValueError(f"Malformed model file {path}: {e}") from e
    model = model_from_dict(document)
    logger.info(f"Loaded {model.kind} model from {path}")
    return model
