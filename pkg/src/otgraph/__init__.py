"""Optimal-transport graph fusion for two-modality classification."""

from .autodiff import Tape, Tensor, grad_check
from .backend import BACKEND, HAVE_COMPILED
from .model import ModelConfig, forward_sample, init_params
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "HAVE_COMPILED",
    "ModelConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "__version__",
    "forward_sample",
    "grad_check",
    "init_params",
    "train",
]
