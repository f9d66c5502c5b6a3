"""Minimal dense-tensor engine with reverse-mode gradients."""

from . import ops
from .optim import SGD, sgd_momentum_step
from .tensor import Tape, Tensor, active_tape, backward, get_default_dtype, set_default_dtype

__all__ = [
    "SGD",
    "Tape",
    "Tensor",
    "active_tape",
    "backward",
    "get_default_dtype",
    "ops",
    "set_default_dtype",
    "sgd_momentum_step",
]
