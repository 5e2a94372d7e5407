"""Minimal reverse-mode autodiff on numpy, plus Adam and a gradient checker."""
from . import ops
from .gradcheck import GradCheckReport, gradient_check
from .nn import Conv1d, Embedding, LayerNorm, Linear, Module, parameter
from .ops import (
    attention,
    concat,
    conv1d,
    conv_transpose1d,
    cross_entropy,
    dropout,
    embedding,
    gelu,
    l1,
    layer_norm,
    linear,
    log_softmax,
    matmul,
    mse,
    relu,
    softmax,
    stop_gradient,
    straight_through,
    upsample_nearest,
)
from .optim import Adam, AdamConfig, adam_step
from .tensor import NumericalAbort, Tensor, as_tensor, default_dtype, no_grad, precision

__all__ = [
    "Adam",
    "AdamConfig",
    "Conv1d",
    "Embedding",
    "GradCheckReport",
    "LayerNorm",
    "Linear",
    "Module",
    "NumericalAbort",
    "Tensor",
    "adam_step",
    "as_tensor",
    "attention",
    "concat",
    "conv1d",
    "conv_transpose1d",
    "cross_entropy",
    "default_dtype",
    "dropout",
    "embedding",
    "gelu",
    "gradient_check",
    "l1",
    "layer_norm",
    "linear",
    "log_softmax",
    "matmul",
    "mse",
    "no_grad",
    "ops",
    "parameter",
    "precision",
    "relu",
    "softmax",
    "stop_gradient",
    "straight_through",
    "upsample_nearest",
]
