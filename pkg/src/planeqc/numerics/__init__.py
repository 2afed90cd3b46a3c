"""Minimal dense-tensor arithmetic with reverse-mode differentiation."""

from .container import decode_tensors, encode_tensors, load_tensors, save_tensors
from .functional import avg_pool2, conv2d, grid_sample
from .tensor import (
    GradientTape,
    Tensor,
    absolute,
    add,
    as_tensor,
    backward,
    broadcast_to,
    concat,
    cos,
    current_tape,
    div,
    elementwise,
    exp,
    get_dtype,
    getitem,
    log,
    matmul,
    mul,
    neg,
    no_grad,
    power,
    precision,
    reduce_l1,
    reduce_l2,
    reduce_max,
    reduce_mean,
    reduce_min,
    reduce_std,
    reduce_sum,
    reduction,
    relu,
    reshape,
    set_precision,
    sin,
    sqrt,
    square,
    stack,
    sub,
    transpose,
)

__all__ = [name for name in dir() if not name.startswith("_")]
