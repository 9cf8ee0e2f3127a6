"""Minimal reverse-mode differentiable array engine."""
from .tensor import DTensor, no_grad, grad_enabled
from .gradcheck import CheckReport, grad_check
from .optim import AdamWState, adamw_step, build_lr_overrides
from .checkpoint import save_checkpoint, load_checkpoint
from . import ops
from .ops import (
    activation,
    add,
    bce_multilabel_loss,
    bilinear_upsample,
    concat,
    conv2d,
    cross_entropy_loss,
    div,
    exp,
    global_avg_pool,
    group_norm,
    l2_normalize,
    log,
    matmul,
    maximum_scalar,
    mean,
    mul,
    narrow,
    neg,
    relu,
    reshape,
    sigmoid,
    softmax,
    softplus,
    sqrt,
    sub,
    sum_,
    tanh,
    transpose,
)

__all__ = [
    "DTensor", "no_grad", "grad_enabled",
    "CheckReport", "grad_check",
    "AdamWState", "adamw_step", "build_lr_overrides",
    "save_checkpoint", "load_checkpoint",
    "ops",
    "activation", "add", "bce_multilabel_loss", "bilinear_upsample", "concat",
    "conv2d", "cross_entropy_loss", "div", "exp", "global_avg_pool",
    "group_norm", "l2_normalize", "log", "matmul", "maximum_scalar", "mean",
    "mul", "narrow", "neg", "relu", "reshape", "sigmoid", "softmax",
    "softplus", "sqrt", "sub", "sum_", "tanh", "transpose",
]
