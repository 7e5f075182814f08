"""Dense-tensor math, reverse-mode autodiff, Adam, and gradient checking."""

from .tensor import (
    Graph,
    Tensor,
    add,
    backpropagate,
    cross_entropy,
    debug_checks,
    gather_rows,
    layer_norm,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    parameter,
    precision,
    relu,
    repeat_rows,
    reshape,
    scale,
    softmax,
    squared_l2,
    stop_gradient,
    sub,
    sum_all,
    transpose,
    verification_mode,
    zero_grads,
)
from .optim import AdamState, adam_update, grads_of
from .gradcheck import GradCheckReport, finite_difference_check
from .checkpoint import load_weights, save_weights

__all__ = [
    "AdamState",
    "GradCheckReport",
    "Graph",
    "Tensor",
    "adam_update",
    "add",
    "backpropagate",
    "cross_entropy",
    "debug_checks",
    "finite_difference_check",
    "gather_rows",
    "grads_of",
    "layer_norm",
    "load_weights",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "parameter",
    "precision",
    "relu",
    "repeat_rows",
    "reshape",
    "save_weights",
    "scale",
    "softmax",
    "squared_l2",
    "stop_gradient",
    "sub",
    "sum_all",
    "transpose",
    "verification_mode",
    "zero_grads",
]
