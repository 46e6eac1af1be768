"""Cloth-changing person re-identification with hairstyle augmentation,
cloth-preserved random erasing and parsing-guided attention."""

from ._accel import backend
from .config import RunConfig, load_config
from .errors import (CheckpointError, ConfigurationError, DataError, EvaluationError, FormatError, MSPError,
                     NumericError, ProbeError, SchemaError, TrainingError)
from .structures import HairstyleLabel, Sample, View

__version__ = "0.1.0"

__all__ = [
    "backend", "RunConfig", "load_config", "HairstyleLabel", "Sample", "View",
    "MSPError", "SchemaError", "ConfigurationError", "DataError", "FormatError", "NumericError",
    "EvaluationError", "ProbeError", "CheckpointError", "TrainingError",
]
