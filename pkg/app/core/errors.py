"""Error types for the point-guided cascade simulator."""

from typing import Dict, Optional


class UndecodableBoxError(ValueError):
    """Raised when a side group of decoded points carries no confidence."""


class ModelNotTrainedError(RuntimeError):
    """Raised when a toy scorer is asked to predict before training."""


class NonFiniteError(RuntimeError):
    """Raised when a toy model produces a non-finite intermediate.

    Attributes:
        diagnostics: Per-parameter summary (name -> max absolute value)
    """

    def __init__(self, message: str, diagnostics: Optional[Dict[str, float]] = None):
        self.diagnostics = diagnostics or {}
        details = ", ".join(f"{name}={value:.3g}" for name, value in self.diagnostics.items())
        super().__init__(f"{message} [{details}]" if details else message)


class SchemaVersionError(ValueError):
    """Raised when a versioned JSON document has an unexpected version."""

    def __init__(self, document: str, expected: int, actual: object):
        self.expected = expected
        self.actual = actual
        super().__init__(f"Unsupported {document} version: expected {expected}, got {actual}")


class ProposalGenerationError(RuntimeError):
    """Raised when background proposals cannot be sampled within the retry budget."""


class UnknownSceneError(KeyError):
    """Raised when detections reference a scene without ground truth."""


class ExperimentError(RuntimeError):
    """Raised when a pipeline step fails; names the scene and stage."""

    def __init__(self, message: str, scene_id: Optional[int] = None, stage: Optional[int] = None):
        self.scene_id = scene_id
        self.stage = stage
        where = []
        if scene_id is not None:
            where.append(f"scene {scene_id}")
        if stage is not None:
            where.append(f"stage {stage}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(f"{prefix}{message}")
