"""Configuration schema definitions for the point-guided cascade simulator.

This module contains the Pydantic models of the experiment configuration
file and of the ablation matrix. Every section forbids unknown keys.
"""

from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.models.cascade import CascadeConfig
from app.models.detection import ScoringConfig
from app.models.predictor import PredictorConfig, PredictorKind
from app.models.scene import ProposalParams, SizeMix
from app.models.training import TrainingConfig


class CorpusConfig(BaseModel):
    """Synthetic corpus settings; ``path`` loads a saved corpus instead."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_scenes: int = Field(default=200, ge=1)
    width: float = Field(default=640.0, gt=0.0)
    height: float = Field(default=480.0, gt=0.0)
    n_objects: int = Field(default=4, ge=0)
    truncated_fraction: float = Field(default=0.2, ge=0.0, le=1.0)
    size_mix: SizeMix = Field(default_factory=SizeMix)
    path: Optional[str] = None


class IsmMode(str, Enum):
    """Source of score_ism."""
    ORACLE = "oracle"
    ORACLE_FULL_EXTENT = "oracle_full_extent"
    TOY = "toy"
    OFF = "off"


class RsmMode(str, Enum):
    """Source of score_rsm."""
    ORACLE = "oracle"
    TOY = "toy"
    OFF = "off"


class ScoringOptions(ScoringConfig):
    """Fused-score settings plus the scorer implementations.

    Attributes:
        ism: oracle, oracle_full_extent (amodal), toy or off (score 1)
        rsm: oracle, toy or off (score 1)
        ism_model_path: Trained toy ISM JSON (ism = toy)
        rsm_model_path: Trained toy RSM JSON (rsm = toy)
    """
    ism: IsmMode = IsmMode.ORACLE
    rsm: RsmMode = RsmMode.ORACLE
    ism_model_path: Optional[str] = None
    rsm_model_path: Optional[str] = None


class ClsConfig(BaseModel):
    """Proposal-time classification confidence."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    decorrelation: float = Field(default=0.3, ge=0.0, le=1.0)


class NmsConfig(BaseModel):
    """Proposal selection before the cascade and final suppression after it."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    pre_threshold: float = Field(default=0.3, ge=0.0, le=1.0)
    max_rois: int = Field(default=96, ge=0)
    final_threshold: float = Field(default=0.5, ge=0.0, le=1.0)


class EvaluationConfig(BaseModel):
    """Extra AP thresholds and the small/medium/large area limits."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    thresholds: List[float] = Field(default_factory=lambda: [0.7, 0.8, 0.9])
    scale_bins: Tuple[float, float] = (32.0 ** 2, 96.0 ** 2)

    @model_validator(mode="after")
    def _check_values(self) -> "EvaluationConfig":
        if any(not 0.0 < t <= 1.0 for t in self.thresholds):
            raise ValueError(f"AP thresholds must lie in (0, 1], got {self.thresholds}")
        if not 0.0 < self.scale_bins[0] < self.scale_bins[1]:
            raise ValueError(f"scale_bins must be increasing and positive, got {self.scale_bins}")
        return self


def _require_file(path: Optional[str], what: str) -> None:
    if path is None:
        raise ValueError(f"{what} is required")
    if not Path(path).is_file():
        raise ValueError(f"{what} does not exist: {path}")


class ExperimentConfig(BaseModel):
    """One experiment: corpus, pipeline, scoring, evaluation and outputs.

    Attributes:
        seed: Run seed (mandatory)
        output_dir: Where results are written; excluded from the config hash
        workers: Scene-level worker threads; None uses CASCADE_WORKERS or 1
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int = Field(ge=0)
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    proposals: ProposalParams = Field(default_factory=ProposalParams)
    cascade: CascadeConfig = Field(default_factory=CascadeConfig)
    predictor: PredictorConfig = Field(default_factory=PredictorConfig)
    scoring: ScoringOptions = Field(default_factory=ScoringOptions)
    cls: ClsConfig = Field(default_factory=ClsConfig)
    nms: NmsConfig = Field(default_factory=NmsConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    output_dir: str = "outputs"
    workers: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _check_paths(self) -> "ExperimentConfig":
        if self.corpus.path is not None:
            _require_file(self.corpus.path, "corpus.path")
        if self.predictor.kind == PredictorKind.TOY:
            _require_file(self.predictor.model_path, "predictor.model_path")
        if self.scoring.ism == IsmMode.TOY:
            _require_file(self.scoring.ism_model_path, "scoring.ism_model_path")
        if self.scoring.rsm == RsmMode.TOY:
            _require_file(self.scoring.rsm_model_path, "scoring.rsm_model_path")
        return self


class AblationRow(BaseModel):
    """One component toggle combination."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    cmm: bool
    ism: bool
    rsm: bool

    @property
    def name(self) -> str:
        parts = [label for label, on in (("cmm", self.cmm), ("ism", self.ism), ("rsm", self.rsm)) if on]
        return "+".join(parts) if parts else "baseline"

    def apply(self, base: ExperimentConfig) -> ExperimentConfig:
        """Derive the row's configuration: CMM off keeps one stage, scorers off score 1."""
        cascade = base.cascade if self.cmm else base.cascade.truncated(1)
        scoring = base.scoring.model_copy(update={
            "ism": base.scoring.ism if self.ism else IsmMode.OFF,
            "rsm": base.scoring.rsm if self.rsm else RsmMode.OFF,
        })
        return base.model_copy(update={"cascade": cascade, "scoring": scoring})


def default_rows() -> List[AblationRow]:
    """The 2^3 combinations, baseline first and full last."""
    toggles = [
        (False, False, False),
        (True, False, False),
        (False, True, False),
        (False, False, True),
        (True, True, False),
        (True, False, True),
        (False, True, True),
        (True, True, True),
    ]
    return [AblationRow(cmm=c, ism=i, rsm=r) for c, i, r in toggles]


class AblationMatrix(BaseModel):
    """Rows of an ablation run."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    rows: List[AblationRow] = Field(default_factory=default_rows, min_length=1)
