"""Predictor model module for the point-guided cascade simulator.

This module contains the settings of the heatmap predictors.
"""

import math
from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class PredictorKind(str, Enum):
    """Available heatmap predictors."""
    ORACLE = "oracle"
    TOY = "toy"


class OracleParams(BaseModel):
    """Misalignment-modelling oracle settings.

    Attributes:
        noise_sigma: Standard deviation of the peak displacement, in cells
        truncate: Clamp out-of-region points to the border cell instead of dropping them
        peak_decay: Exponential falloff per cell away from the peak
        background_level: Floor value of every cell, in [0, 0.5)
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    noise_sigma: float = Field(default=0.0, ge=0.0)
    truncate: bool = True
    peak_decay: float = Field(default=1.0, gt=0.0)
    background_level: float = Field(default=0.0, ge=0.0, lt=0.5)

    @model_validator(mode="after")
    def _check_background(self) -> "OracleParams":
        if self.background_level >= math.exp(-self.peak_decay):
            raise ValueError(
                f"background_level {self.background_level} must stay below the peak value "
                f"at radius 1 ({math.exp(-self.peak_decay):.4f})"
            )
        return self


class PredictorConfig(BaseModel):
    """Which heatmap predictor the cascade uses.

    Attributes:
        kind: oracle or toy
        oracle: Oracle settings (kind = oracle)
        model_path: Trained toy model JSON (kind = toy)
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: PredictorKind = PredictorKind.ORACLE
    oracle: OracleParams = Field(default_factory=OracleParams)
    model_path: Optional[str] = None
