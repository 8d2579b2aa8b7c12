"""Toy models for the point-guided cascade simulator.

This module contains the tiny torch models that stand in for the learned grid
branch and the two scoring heads, plus the forward/backward helpers the
cascade loss and gradient checks run through.
"""

import logging
import math
from typing import Dict, List, Optional

import numpy as np
import torch
from torch import nn

from app.core.errors import NonFiniteError
from app.core.grid_codec import represented_region
from app.core.scoring import ISM_FEATURE_DIM
from app.models.box import BBox
from app.models.heatmap import GridLayout, HeatmapSet
from app.models.scene import Scene

logger = logging.getLogger(__name__)

BOX_INPUT_DIM = 6
INIT_STD = 0.1


def _init_linear(layer: nn.Linear, generator: torch.Generator) -> None:
    with torch.no_grad():
        layer.weight.normal_(0.0, INIT_STD, generator=generator)
        layer.bias.zero_()


def parameter_diagnostics(model: nn.Module) -> Dict[str, float]:
    """Max absolute value per named parameter (NaN-aware)."""
    return {name: float(p.detach().abs().max()) for name, p in model.named_parameters()}


def get_flat_parameters(model: nn.Module) -> np.ndarray:
    """Copy all parameters into one float64 vector."""
    return nn.utils.parameters_to_vector(model.parameters()).detach().numpy().astype(np.float64).copy()


def set_flat_parameters(model: nn.Module, vector: np.ndarray) -> None:
    """Overwrite all parameters from a flat vector."""
    with torch.no_grad():
        nn.utils.vector_to_parameters(torch.as_tensor(vector, dtype=torch.float64), model.parameters())


def box_inputs(scene: Scene, box: BBox, ratio: float) -> np.ndarray:
    """Ground-truth-free inputs of the heatmap model: normalized box geometry and ratio."""
    represented_region(box, ratio)
    cx, cy = box.center
    width, height = scene.bounds.width, scene.bounds.height
    return np.array([
        cx / width,
        cy / height,
        box.width / width,
        box.height / height,
        1.0 / ratio,
        math.log(box.width / box.height),
    ], dtype=np.float64)


class ToyHeatmapModel(nn.Module):
    """Two-layer affine + tanh map from box inputs to S x S x 9 heatmap logits.

    The second layer emits a row and a column logit vector per channel; the
    cell logit is their sum, which keeps the model under 20k parameters.
    """

    kind = "toy_heatmap"

    def __init__(self, resolution: int = 28, n_points: int = 9, hidden: int = 32, seed: int = 0):
        super().__init__()
        self.resolution = resolution
        self.n_points = n_points
        self.hidden = hidden
        self.seed = seed
        self.fc1 = nn.Linear(BOX_INPUT_DIM, hidden).double()
        self.fc2 = nn.Linear(hidden, n_points * 2 * resolution).double()
        generator = torch.Generator().manual_seed(seed)
        _init_linear(self.fc1, generator)
        _init_linear(self.fc2, generator)

    def config(self) -> Dict:
        return {"resolution": self.resolution, "n_points": self.n_points, "hidden": self.hidden, "seed": self.seed}

    def forward(self, inputs: torch.Tensor) -> torch.Tensor:
        out = self.fc2(torch.tanh(self.fc1(inputs)))
        out = out.view(-1, self.n_points, 2, self.resolution)
        logits = out[:, :, 0, :, None] + out[:, :, 1, None, :]
        return torch.sigmoid(logits)


class ToyScorer(nn.Module):
    """Small MLP over heatmap summaries with sigmoid outputs.

    Attributes:
        trained: Set once training finished; prediction refuses untrained models
    """

    kind = "toy_scorer"

    def __init__(self, hidden: List[int], outputs: int, seed: int = 0, trained: bool = False):
        super().__init__()
        self.hidden = list(hidden)
        self.outputs = outputs
        self.seed = seed
        self.trained = trained
        sizes = [ISM_FEATURE_DIM] + self.hidden + [outputs]
        self.layers = nn.ModuleList([nn.Linear(a, b).double() for a, b in zip(sizes, sizes[1:])])
        generator = torch.Generator().manual_seed(seed)
        for layer in self.layers:
            _init_linear(layer, generator)

    def config(self) -> Dict:
        return {"seed": self.seed, "trained": self.trained}

    def forward(self, inputs: torch.Tensor) -> torch.Tensor:
        x = inputs
        for layer in self.layers[:-1]:
            x = torch.tanh(layer(x))
        return torch.sigmoid(self.layers[-1](x))

    def predict(self, vector: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            out = self(torch.as_tensor(np.atleast_2d(vector), dtype=torch.float64))
        if not torch.all(torch.isfinite(out)):
            raise NonFiniteError(f"{self.kind} produced non-finite scores", parameter_diagnostics(self))
        return out.numpy()


class ToyIsmModel(ToyScorer):
    """Three fully connected layers regressing (fg, bg) = (IoU, 1 - IoU)."""

    kind = "toy_ism"

    def __init__(self, seed: int = 0, trained: bool = False):
        super().__init__(hidden=[32, 32], outputs=2, seed=seed, trained=trained)


class ToyRsmModel(ToyScorer):
    """Classifier trained on resampled positives (final boxes) and RPN negatives."""

    kind = "toy_rsm"

    def __init__(self, seed: int = 0, trained: bool = False):
        super().__init__(hidden=[32], outputs=1, seed=seed, trained=trained)


def _check_finite(model: nn.Module, tensor: torch.Tensor, what: str) -> None:
    if not torch.all(torch.isfinite(tensor)):
        raise NonFiniteError(f"Non-finite {what} in {getattr(model, 'kind', 'model')}", parameter_diagnostics(model))


def toy_forward(model: ToyHeatmapModel, scene: Scene, box: BBox, ratio: float,
                layout: Optional[GridLayout] = None) -> HeatmapSet:
    """Run the heatmap model on one box.

    Raises:
        NonFiniteError: If the output is not finite
    """
    layout = layout or GridLayout(resolution=model.resolution)
    if layout.resolution != model.resolution:
        raise ValueError(f"Model resolution {model.resolution} does not match layout {layout.resolution}")
    with torch.no_grad():
        probs = model(torch.as_tensor(box_inputs(scene, box, ratio)[None, :]))
    _check_finite(model, probs, "heatmap")
    return HeatmapSet(
        values=probs[0].numpy().copy(),
        proposal=box,
        ratio=ratio,
        out_of_region=np.zeros(model.n_points, dtype=bool),
    )


def toy_backward(model: nn.Module, inputs: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Pull an upstream gradient (dL/d outputs) back to a flat parameter gradient.

    Args:
        model: Toy heatmap model or toy scorer
        inputs: Batch of model inputs
        upstream: Gradient of the loss w.r.t. the model outputs, same shape as the outputs

    Returns:
        Flat gradient, ordered like ``get_flat_parameters``

    Raises:
        NonFiniteError: If an intermediate is not finite
    """
    params = list(model.parameters())
    outputs = model(torch.as_tensor(inputs, dtype=torch.float64))
    _check_finite(model, outputs, "forward output")
    grads = torch.autograd.grad(outputs, params, grad_outputs=torch.as_tensor(upstream, dtype=torch.float64))
    flat = torch.cat([g.reshape(-1) for g in grads])
    _check_finite(model, flat, "gradient")
    return flat.detach().numpy().copy()


class ToyPredictor:
    """Heatmap predictor backed by a trained toy model; the seed is unused."""

    def __init__(self, model: ToyHeatmapModel):
        self.model = model

    def predict(self, scene: Scene, box: BBox, ratio: float, layout: GridLayout, seed: int) -> HeatmapSet:
        return toy_forward(self.model, scene, box, ratio, layout)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
