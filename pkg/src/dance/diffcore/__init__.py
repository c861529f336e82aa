from .optim import AdamW, LrSchedule, adamw_step, onecycle_lr
from .rng import RngState, RngStreams, gumbel, gumbel_from_uniform
from .tensor import (
    DimensionError,
    Parameter,
    Tensor,
    activation,
    concat,
    cross_entropy,
    dense_affine,
    exp,
    log,
    log_softmax,
    matmul,
    mul,
    add,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    straight_through,
    tabs,
    tsum,
)

__all__ = [
    "AdamW", "LrSchedule", "adamw_step", "onecycle_lr",
    "RngState", "RngStreams", "gumbel", "gumbel_from_uniform",
    "DimensionError", "Parameter", "Tensor", "activation", "concat", "cross_entropy",
    "dense_affine", "exp", "log", "log_softmax", "matmul", "mul", "add", "no_grad", "relu", "reshape",
    "sigmoid", "softmax", "straight_through", "tabs", "tsum",
]
