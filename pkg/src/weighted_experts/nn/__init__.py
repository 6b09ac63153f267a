"""Small float64 autodiff engine: tensors, layers, Adam and weight files."""
from .autograd import (
    Parameter,
    Tape,
    Tensor,
    backward,
    cross_entropy,
    softmax,
    softmax_array,
    log_softmax_array,
)
from .layers import Conv2d, Dense, Flatten, MaxPool2, ReLU, Sequential, Softmax, forward, zero_grad
from .optim import Adam, AdamState, adam_step
from . import serialize

__all__ = [
    "Adam", "AdamState", "Conv2d", "Dense", "Flatten", "MaxPool2", "Parameter", "ReLU",
    "Sequential", "Softmax", "Tape", "Tensor", "adam_step", "backward", "cross_entropy",
    "forward", "log_softmax_array", "serialize", "softmax", "softmax_array", "zero_grad",
]
