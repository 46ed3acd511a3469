"""Minimal differentiable-computation core used by all training stages."""

from .tensor import (
    Tensor,
    add,
    bmm3,
    as_tensor,
    clip,
    concat,
    conv2d,
    default_dtype,
    dense_forward,
    dtype_context,
    exp,
    log,
    log_softmax_rows,
    matmul,
    maximum,
    minimum,
    mse_loss,
    mul,
    narrow,
    pad2d,
    relu,
    reshape,
    set_check_finite,
    set_default_dtype,
    sigmoid,
    softmax_rows,
    take_along_rows,
    tanh,
    tmean,
    transpose,
    transpose_last2,
    tsum,
    upsample2_nearest,
)
from .nn import MLP, Conv2d, Dense, LSTMCell, fan_in_normal, lstm_step
from .optim import SGD, Adam, clip_grad_norm
from .params import ParamStore, load_checkpoint, save_checkpoint
from .gradcheck import check_gradients, numeric_gradient, relative_error

__all__ = [
    "Tensor", "add", "bmm3", "as_tensor", "clip", "concat", "conv2d", "default_dtype",
    "dense_forward", "dtype_context", "exp", "log", "log_softmax_rows",
    "matmul", "maximum", "minimum", "mse_loss", "mul", "narrow", "pad2d",
    "relu", "reshape", "set_check_finite", "set_default_dtype", "sigmoid",
    "softmax_rows", "take_along_rows", "tanh", "tmean", "transpose", "transpose_last2", "tsum",
    "upsample2_nearest",
    "MLP", "Conv2d", "Dense", "LSTMCell", "fan_in_normal", "lstm_step",
    "SGD", "Adam", "clip_grad_norm",
    "ParamStore", "load_checkpoint", "save_checkpoint",
    "check_gradients", "numeric_gradient", "relative_error",
]
