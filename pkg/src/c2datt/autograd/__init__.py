"""Minimal dense-tensor engine with reverse-mode differentiation."""

from . import functional
from .functional import (
    batch_norm_2d, broadcast_mul, conv2d, instance_norm_freq, linear, reduce_moments, relu,
    sigmoid, softmax, tanh,
)
from .gradcheck import grad_check
from .nn import BatchNorm2d, Conv2d, InstanceNormFreq, Linear, Module, Parameter
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, get_dtype, no_grad, ones, precision, set_dtype, tensor, zeros

__all__ = [
    "Adam", "AdamState", "BatchNorm2d", "Conv2d", "InstanceNormFreq", "Linear", "Module", "Parameter",
    "Tensor", "adam_step", "batch_norm_2d", "broadcast_mul", "conv2d", "functional", "get_dtype",
    "grad_check", "instance_norm_freq", "linear", "no_grad", "ones", "precision", "reduce_moments",
    "relu", "set_dtype", "sigmoid", "softmax", "tanh", "tensor", "zeros",
]
