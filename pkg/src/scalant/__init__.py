"""scalant: width-elastic encoder-decoder transformers with weight sharing
and three-stage self-distillation."""

from .model import (
    ModelConfig,
    ParameterStore,
    SubModel,
    WidthSpec,
    crop_matrix,
    materialize,
    sample_submodel,
    type1_spec,
    widest_spec,
)
from .tensor import Tape, Tensor, backward

__all__ = [
    "ModelConfig",
    "ParameterStore",
    "SubModel",
    "WidthSpec",
    "crop_matrix",
    "materialize",
    "sample_submodel",
    "type1_spec",
    "widest_spec",
    "Tape",
    "Tensor",
    "backward",
]

__version__ = "0.1.0"
