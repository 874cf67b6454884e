"""Med-2D SegNet: a lightweight 2-D medical image segmentation network on numpy."""

from .arch import (
    LAYER_IDS,
    VARIANTS,
    Model,
    ModelConfig,
    build_model,
    complexity_ledger,
    count_parameters,
    enumerate_parameters,
    filter_schedule,
)
from .tensor import Tape, Tensor, backward, grad_check

__version__ = "0.1.0"

__all__ = [
    "LAYER_IDS",
    "VARIANTS",
    "Model",
    "ModelConfig",
    "Tape",
    "Tensor",
    "backward",
    "build_model",
    "complexity_ledger",
    "count_parameters",
    "enumerate_parameters",
    "filter_schedule",
    "grad_check",
]
