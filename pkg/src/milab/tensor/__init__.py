"""Minimal float64 tensor library with reverse-mode differentiation."""

from . import functional
from .core import (
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    check_finite,
    clip,
    col2im,
    concat,
    div,
    embed,
    exp,
    getitem,
    im2col,
    leaky_relu,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    sigmoid,
    sub,
    tabs,
    tanh,
    tmax,
    transpose,
    tsum,
)
from .gradcheck import grad_check
from .nn import Conv2d, ConvTranspose2d, Linear, Module
from .optim import SGD, Adam, Optimizer, make_optimizer
from .random import derive_seed, rng
