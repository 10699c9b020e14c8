"""Minimal dense tensor with reverse-mode autodiff."""

from memroute.tensor import mrt
from memroute.tensor.core import DTYPES, Node, Tape, Tensor, as_tensor, backward, is_grad_enabled, no_grad
from memroute.tensor.gradcheck import grad_check, grad_check_params, numerical_grad
from memroute.tensor.ops import (
    abs,
    add,
    broadcast_to,
    concat,
    conv1d,
    depthwise_conv2d,
    div,
    exp,
    gelu,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    narrow,
    neg,
    reshape,
    scatter,
    sigmoid,
    softmax,
    split,
    square,
    stack,
    straight_through,
    sub,
    sum,
    swapaxes,
    take,
    transpose,
    unbroadcast,
)

__all__ = [
    "DTYPES", "Node", "Tape", "Tensor", "as_tensor", "backward", "is_grad_enabled", "no_grad",
    "grad_check", "grad_check_params", "numerical_grad", "mrt",
    "abs", "add", "broadcast_to", "concat", "conv1d", "depthwise_conv2d", "div", "exp", "gelu",
    "layer_norm", "linear", "log", "log_softmax", "matmul", "mean", "mul", "narrow", "neg",
    "reshape", "scatter", "sigmoid", "softmax", "split", "square", "stack", "straight_through",
    "sub", "sum", "swapaxes", "take", "transpose", "unbroadcast",
]
