"""Bidirectionally guided underwater object detection at desk scale."""

from .errors import (AnnotationError, ArtifactError, BGDetError, ConfigError, ContractError,
                     NumericalError, PrerequisiteError, ShapeError, TrainingDiverged)

__version__ = "0.1.0"

__all__ = [
    "AnnotationError", "ArtifactError", "BGDetError", "ConfigError", "ContractError",
    "NumericalError", "PrerequisiteError", "ShapeError", "TrainingDiverged", "__version__",
]
