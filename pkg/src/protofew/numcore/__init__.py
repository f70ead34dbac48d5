"""Numeric core: tensors, autodiff, Adam, finite differences, checkpoints."""

from .tensor import (
    Tensor,
    add,
    add_scalar,
    adaptive_avg_pool2d,
    as_tensor,
    backward,
    batch_norm_eval,
    batch_norm_train,
    channel_affine,
    conv2d,
    conv_output_extent,
    dot_product_pairwise,
    exp,
    forward_op,
    global_avg_pool,
    global_local_scores,
    l2_normalize,
    linear,
    log,
    log_sum_exp,
    matmul,
    mul,
    neg,
    no_grad,
    parameter,
    position_dot_scores,
    relu,
    reshape,
    scale,
    softmax,
    squared_euclidean_pairwise,
    tanh,
    tanh_clip,
    tmean,
    transpose,
    tsum,
)
from .optim import AdamState, adam_step
from .gradcheck import finite_diff_gradient, relative_error
from .checkpoint import load_arrays, save_arrays

__all__ = [
    "AdamState", "Tensor", "adam_step", "adaptive_avg_pool2d", "add", "add_scalar",
    "as_tensor", "backward", "batch_norm_eval", "batch_norm_train", "channel_affine",
    "conv2d", "conv_output_extent", "dot_product_pairwise", "exp", "finite_diff_gradient",
    "forward_op", "global_avg_pool", "global_local_scores", "l2_normalize", "linear",
    "load_arrays", "log", "log_sum_exp", "matmul", "mul", "neg", "no_grad", "parameter",
    "position_dot_scores", "relative_error", "relu", "reshape", "save_arrays", "scale",
    "softmax", "squared_euclidean_pairwise", "tanh", "tanh_clip", "tmean", "transpose",
    "tsum",
]
