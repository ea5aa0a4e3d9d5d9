from . import functional
from .functional import (
    cosine_similarity,
    cross_entropy,
    dropout,
    embedding,
    gelu,
    kl_divergence,
    layer_norm,
    log_softmax,
    relu,
    softmax,
)
from .gradcheck import GradCheckError, finite_difference_check
from .tensor import ShapeError, Tape, TapeError, Tensor, active_tape, as_tensor, no_grad, parameter

__all__ = [
    "GradCheckError",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "active_tape",
    "as_tensor",
    "cosine_similarity",
    "cross_entropy",
    "dropout",
    "embedding",
    "finite_difference_check",
    "functional",
    "gelu",
    "kl_divergence",
    "layer_norm",
    "log_softmax",
    "no_grad",
    "parameter",
    "relu",
    "softmax",
]
