"""Massive-MIMO fingerprint positioning with a from-scratch CNN."""

from mmfp.errors import (
    ConfigError,
    CorrelationError,
    FormatError,
    ProvenanceError,
    ShapeError,
    TrainingDivergedError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "CorrelationError",
    "FormatError",
    "ProvenanceError",
    "ShapeError",
    "TrainingDivergedError",
]
