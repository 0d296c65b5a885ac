"""Minimal dense tensors with reverse-mode differentiation."""

from . import ops
from .gradcheck import analytic_gradient, grad_check, numeric_gradient, relative_errors
from .ops import (
    add, attention, conv1d_same, conv_output_length, dropout, index, layer_norm, linear,
    matmul, mean, mul, relu, reshape, same_padding, scale, softmax, softmax_array,
    softmax_xent, square, sub, transpose,
)
from .ops import sum as tsum
from .tensor import Tape, Tensor, active_tape, backward, constant, default_dtype, parameter, precision

__all__ = [
    "Tape", "Tensor", "active_tape", "add", "analytic_gradient", "attention", "backward",
    "constant", "conv1d_same", "conv_output_length", "default_dtype", "dropout", "grad_check",
    "index", "layer_norm", "linear", "matmul", "mean", "mul", "numeric_gradient", "ops",
    "parameter", "precision", "relative_errors", "relu", "reshape", "same_padding", "scale",
    "softmax", "softmax_array", "softmax_xent", "square", "sub", "transpose", "tsum",
]
