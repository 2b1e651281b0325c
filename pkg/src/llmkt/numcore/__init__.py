"""Numerical core: tensors with reverse-mode gradients, AdamW, cosine schedule."""

from .checkpoint import load_tensors, save_tensors
from .gradcheck import grad_check, numeric_grad
from .layers import LayerNorm, Linear, sinusoidal_positions
from .module import Module, parameter
from .optim import AdamW, OptimState, adam_step, cosine_lr
from .tensor import (
    Tensor,
    as_tensor,
    bce_with_logits,
    concat,
    cross_entropy,
    default_dtype,
    exp,
    gelu,
    get_default_dtype,
    layer_norm,
    log,
    log_softmax,
    matmul,
    no_grad,
    relu,
    replace_rows,
    set_default_dtype,
    sigmoid,
    softmax,
    softplus,
    stack,
    swapaxes,
    attention,
    prefix_attention,
    take_rows,
    tanh,
)

__all__ = [
    "AdamW", "attention", "prefix_attention", "LayerNorm", "Linear", "Module", "OptimState", "Tensor", "adam_step", "as_tensor",
    "bce_with_logits", "concat", "cosine_lr", "cross_entropy", "default_dtype", "exp", "gelu",
    "get_default_dtype", "grad_check", "layer_norm", "load_tensors", "log", "log_softmax", "matmul",
    "no_grad", "numeric_grad", "parameter", "relu", "replace_rows", "save_tensors",
    "set_default_dtype", "sigmoid", "sinusoidal_positions", "softmax", "softplus", "stack",
    "swapaxes", "take_rows", "tanh",
]
