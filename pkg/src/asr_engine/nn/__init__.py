"""Tensors with reverse-mode gradients, initializers and the architecture zoo."""
from .autograd import Tape, Tensor
from .layers import DropoutMask, RunningStats, batch_norm, glorot_init, make_dropout_mask, orthogonal_init
from .models import KINDS, Architecture, HyperparamError, make_architecture, schema_for

__all__ = [
    "Tape", "Tensor", "DropoutMask", "RunningStats", "batch_norm", "glorot_init",
    "make_dropout_mask", "orthogonal_init", "KINDS", "Architecture", "HyperparamError",
    "make_architecture", "schema_for",
]
