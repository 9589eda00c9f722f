"""Tensor math, reverse-mode autodiff, optimizers and seeded random streams."""

from .optim import OptimizerState, Schedule, sgd_step, zero_grad
from .rng import RngStream
from .tensor import (
    Tape,
    Tensor,
    add,
    backward,
    batch_norm,
    concat,
    l2_normalize,
    linear,
    log_softmax,
    matmul,
    mul,
    relu,
    reshape,
    soft_target_cross_entropy,
    softmax,
    softmax_cross_entropy,
    sub,
    transpose,
    tmean,
    tsum,
)

__all__ = [
    "OptimizerState",
    "RngStream",
    "Schedule",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "batch_norm",
    "concat",
    "l2_normalize",
    "linear",
    "log_softmax",
    "matmul",
    "mul",
    "relu",
    "reshape",
    "sgd_step",
    "soft_target_cross_entropy",
    "softmax",
    "softmax_cross_entropy",
    "sub",
    "tmean",
    "transpose",
    "tsum",
    "zero_grad",
]
