"""Sparse-interest network for multi-interest sequential recommendation."""

from .autodiff import Tape, Tensor, backward, grad_check
from .model import ModelConfig, ModelParams, encode, forward, init_params
from .training import TrainConfig, train

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "grad_check",
    "ModelConfig",
    "ModelParams",
    "encode",
    "forward",
    "init_params",
    "TrainConfig",
    "train",
]
__version__ = "0.1.0"
