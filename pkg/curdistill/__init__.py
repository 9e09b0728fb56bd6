"""
curdistill - curriculum dataset distillation
Teacher training, curriculum-wise data synthesis and downstream evaluation
"""

from .client import DistillClient, load_run_settings
from .exceptions import (
    ArchitectureError,
    ConfigError,
    CurDistillError,
    DataCorruptionError,
    DatasetLoadError,
    DivergenceError,
    FormatError,
    InsufficientDataError,
    StageError,
    ValidationError,
)
from .models import CurriculumPlan, DistillConfigs, DistillOptions, SynthesisConfig, TrainConfig

__version__ = "1.0.0"

__all__ = [
    "DistillClient",
    "load_run_settings",
    "CurriculumPlan",
    "DistillConfigs",
    "DistillOptions",
    "SynthesisConfig",
    "TrainConfig",
    "CurDistillError",
    "DatasetLoadError",
    "DataCorruptionError",
    "FormatError",
    "ValidationError",
    "ConfigError",
    "ArchitectureError",
    "InsufficientDataError",
    "DivergenceError",
    "StageError",
]
