"""Minimal tensor arithmetic with reverse-mode automatic differentiation."""

from .rng import Rng
from .tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    clamp_counts,
    concat,
    conv2d,
    default_dtype,
    div,
    exp,
    get_epsilon,
    l2_normalize,
    log,
    log_softmax,
    logsumexp,
    matmul,
    max_pool2d,
    mean,
    mul,
    neg,
    no_grad,
    pow,
    precision,
    relu,
    reshape,
    set_epsilon,
    slice_,
    softmax,
    sqrt,
    standardize,
    sub,
    sum,
    transpose,
    zero_grad,
)

__all__ = [
    "Rng", "Tensor", "add", "as_tensor", "backward", "clamp_counts", "concat", "conv2d",
    "default_dtype", "div", "exp", "get_epsilon", "l2_normalize", "log", "log_softmax",
    "logsumexp", "matmul", "max_pool2d", "mean", "mul", "neg", "no_grad", "pow", "precision",
    "relu", "reshape", "set_epsilon", "slice_", "softmax", "sqrt", "standardize", "sub", "sum",
    "transpose", "zero_grad",
]
