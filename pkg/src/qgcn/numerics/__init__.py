from .functional import BatchNormParams, RunningStats, batch_norm, dropout, dropout_mask, philox
from .gradcheck import GradcheckReport, gradcheck
from .tensor import (
    Tensor,
    add,
    arccos_clamped,
    as_tensor,
    atan2,
    backward,
    concat,
    cos,
    div,
    getitem,
    grad_enabled,
    matmul,
    mean,
    mul,
    no_grad,
    norm,
    power,
    relu,
    reshape,
    sigmoid,
    sin,
    sqrt,
    square,
    stack,
    sub,
    tabs,
    transpose,
    tsum,
)

__all__ = [
    "BatchNormParams",
    "GradcheckReport",
    "RunningStats",
    "Tensor",
    "add",
    "arccos_clamped",
    "as_tensor",
    "atan2",
    "backward",
    "batch_norm",
    "concat",
    "cos",
    "div",
    "dropout",
    "dropout_mask",
    "getitem",
    "grad_enabled",
    "gradcheck",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "norm",
    "philox",
    "power",
    "relu",
    "reshape",
    "sigmoid",
    "sin",
    "sqrt",
    "square",
    "stack",
    "sub",
    "tabs",
    "transpose",
    "tsum",
]
