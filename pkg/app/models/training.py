"""Training model module for the point-guided cascade simulator.

This module contains the settings of the toy model training runs.
"""

from enum import Enum

from pydantic import BaseModel, ConfigDict, Field


class OptimizerKind(str, Enum):
    """Torch optimizers available to toy training."""
    ADAM = "adam"
    SGD = "sgd"


class TrainingConfig(BaseModel):
    """Toy training settings.

    Attributes:
        n_scenes: Scenes in the training corpus
        heatmap_steps: Full-batch steps for the heatmap model
        scorer_steps: Full-batch steps for each scorer
        learning_rate: Heatmap model step size
        scorer_learning_rate: Scorer step size
        optimizer: adam, or sgd (momentum 0.9, weight decay 4e-5)
        max_samples_per_stage: Cap on oracle-driven boxes per stage
        hidden: Hidden width of the heatmap model
        holdout_fraction: Share of scorer data kept out of training
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_scenes: int = Field(default=20, ge=1)
    heatmap_steps: int = Field(default=500, ge=0)
    scorer_steps: int = Field(default=1500, ge=0)
    learning_rate: float = Field(default=0.02, gt=0.0)
    scorer_learning_rate: float = Field(default=0.01, gt=0.0)
    optimizer: OptimizerKind = OptimizerKind.ADAM
    max_samples_per_stage: int = Field(default=256, ge=1)
    hidden: int = Field(default=32, ge=1)
    holdout_fraction: float = Field(default=0.25, ge=0.0, lt=1.0)
