"""Minimal reverse-mode autodiff on numpy arrays."""
from . import ops
from .checkpoint import CheckpointMismatch, load_checkpoint, read_header, save_checkpoint
from .gradcheck import grad_check
from .optim import Adam, AdamState, adam_step
from .tensor import DEFAULT_DTYPE, ShapeError, Tape, Tensor, active_tape

__all__ = [
    "ops", "Tensor", "Tape", "ShapeError", "active_tape", "DEFAULT_DTYPE",
    "Adam", "AdamState", "adam_step", "grad_check",
    "save_checkpoint", "load_checkpoint", "read_header", "CheckpointMismatch",
]
