"""Minimal dense tensor library with reverse-mode automatic differentiation.

Implements exactly the op set the registration stack needs: elementwise
arithmetic, reductions, leaky ReLU, channel concatenation, slicing,
permutation, bilinear 2x upsampling, and (transposed) 2D convolution.
"""

from .tensor import Tape, Tensor, active_tape, as_tensor, backward, record
from .ops import (
    abs_,
    add,
    chw_to_hwc,
    concat_channels,
    exp_neg,
    hwc_to_chw,
    leaky_relu,
    mul,
    permute,
    reduce_mean,
    reduce_sum,
    scalar_mul,
    slice_,
    sqrt_,
    sub,
    upsample2x,
)
from .conv import conv2d, conv2d_transpose
from .gradcheck import check_gradients, numeric_gradient

__all__ = [
    "Tape",
    "Tensor",
    "active_tape",
    "as_tensor",
    "backward",
    "record",
    "abs_",
    "add",
    "chw_to_hwc",
    "concat_channels",
    "exp_neg",
    "hwc_to_chw",
    "leaky_relu",
    "mul",
    "permute",
    "reduce_mean",
    "reduce_sum",
    "scalar_mul",
    "slice_",
    "sqrt_",
    "sub",
    "upsample2x",
    "conv2d",
    "conv2d_transpose",
    "check_gradients",
    "numeric_gradient",
]
