from . import functional
from .gradcheck import gradcheck, numerical_gradient, relative_error
from .optim import SGD, Adam, Optimizer, OptimizerState, cosine_lr, optimizer_step
from .tensor import Tape, Tensor, as_tensor, backward, current_tape, default_dtype, float64_mode

__all__ = [
    "Adam",
    "Optimizer",
    "OptimizerState",
    "SGD",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "cosine_lr",
    "current_tape",
    "default_dtype",
    "float64_mode",
    "functional",
    "gradcheck",
    "numerical_gradient",
    "optimizer_step",
    "relative_error",
]
