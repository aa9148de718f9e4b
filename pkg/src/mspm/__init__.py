"""Multiscale attention-based multimodal patch descriptor toolkit."""

from .autodiff import Tape, Tensor, backward
from .errors import (CheckpointMismatch, CorruptFile, Divergence, FormatError,
                     InvalidArgument, MspmError, NoGrad, NoGraph)
from .model import DescriptorModel, ModelConfig

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor", "backward",
    "DescriptorModel", "ModelConfig",
    "MspmError", "InvalidArgument", "NoGraph", "NoGrad", "FormatError",
    "CorruptFile", "CheckpointMismatch", "Divergence",
    "__version__",
]
