"""Minimal dense tensor engine with reverse-mode differentiation."""

from adapter.ndcore.functional import (
    activation,
    conv2d,
    conv_output_size,
    cross_entropy,
    gelu,
    layer_norm,
    log_softmax,
    max_pool2d,
    relu,
    softmax,
)
from adapter.ndcore.nn import MLP, Conv2d, LayerNorm, Linear, Module, Parameter
from adapter.ndcore.optim import SGD, AdamW, Optimizer
from adapter.ndcore.tensor import (
    Tensor,
    backward,
    concat,
    count_flops,
    exp,
    get_default_dtype,
    is_grad_enabled,
    log,
    matmul,
    no_grad,
    precision,
    set_default_dtype,
    stack,
    tape_order,
)

pool2d_max = max_pool2d

__all__ = [
    "Tensor", "Parameter", "Module", "Linear", "LayerNorm", "Conv2d", "MLP",
    "SGD", "AdamW", "Optimizer",
    "backward", "tape_order", "no_grad", "is_grad_enabled", "precision",
    "get_default_dtype", "set_default_dtype", "count_flops",
    "matmul", "concat", "stack", "exp", "log",
    "softmax", "log_softmax", "layer_norm", "gelu", "relu", "activation",
    "conv2d", "conv_output_size", "max_pool2d", "pool2d_max", "cross_entropy",
]
