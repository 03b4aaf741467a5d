"""Differentiable ops on tensors.

Broadcasting is deliberately restricted: binary ops accept equal shapes or
a tensor-vs-python-scalar pair, nothing else. Reductions accumulate in
float64 and return the input's storage dtype.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, record


def _require_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _require_same_shape(a, b, "add")
    return record(a.data + b.data, (a, b), lambda gy: (gy, gy))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _require_same_shape(a, b, "sub")
    return record(a.data - b.data, (a, b), lambda gy: (gy, -gy))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _require_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda gy: (gy * bd, gy * ad))


def scalar_mul(t, c):
    """Multiply a tensor by a python scalar."""
    t = as_tensor(t)
    c = float(c)
    return record(t.data * np.asarray(c, dtype=t.dtype), (t,), lambda gy: (gy * c,))


def abs_(t):
    """Elementwise absolute value; subgradient 0 at 0."""
    t = as_tensor(t)
    sign = np.sign(t.data)
    return record(np.abs(t.data), (t,), lambda gy: (gy * sign,))


def exp_neg(t):
    """Elementwise exp(-x)."""
    t = as_tensor(t)
    out = np.exp(-t.data)
    return record(out, (t,), lambda gy: (-gy * out,))


def sqrt_(t):
    """Elementwise square root (inputs must be > 0 for a finite gradient)."""
    t = as_tensor(t)
    out = np.sqrt(t.data)
    return record(out, (t,), lambda gy: (gy * (0.5 / out),))


def leaky_relu(t, slope=0.1):
    """max(x, slope*x); the kink at 0 takes the negative-branch slope."""
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in [0, 1), got {slope}")
    t = as_tensor(t)
    factor = np.where(t.data > 0, t.dtype.type(1.0), t.dtype.type(slope))
    return record(t.data * factor, (t,), lambda gy: (gy * factor,))


def reduce_sum(t):
    """Sum of all elements, accumulated in float64."""
    t = as_tensor(t)
    out = np.asarray(np.sum(t.data, dtype=np.float64), dtype=t.dtype)
    shape, dtype = t.shape, t.dtype

    def grad_fn(gy):
        return (np.full(shape, gy, dtype=dtype) if shape else np.asarray(gy, dtype=dtype),)

    return record(out, (t,), grad_fn)


def reduce_mean(t):
    """Mean of all elements, accumulated in float64."""
    t = as_tensor(t)
    n = t.size
    if n == 0:
        raise ShapeError("reduce_mean of an empty tensor")
    out = np.asarray(np.sum(t.data, dtype=np.float64) / n, dtype=t.dtype)
    shape, dtype = t.shape, t.dtype

    def grad_fn(gy):
        g = gy / n
        return (np.full(shape, g, dtype=dtype) if shape else np.asarray(g, dtype=dtype),)

    return record(out, (t,), grad_fn)


def concat_channels(a, b):
    """Stack two NCHW tensors along the channel axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError(f"concat_channels expects NCHW tensors, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(
            f"concat_channels: batch/spatial sizes differ: {tuple(a.shape)} vs {tuple(b.shape)}"
        )
    ca = a.shape[1]

    def grad_fn(gy):
        return gy[:, :ca], gy[:, ca:]

    return record(np.concatenate([a.data, b.data], axis=1), (a, b), grad_fn)


def slice_(t, key):
    """Basic (non-fancy) indexing; the gradient scatters into zeros."""
    t = as_tensor(t)
    out = t.data[key]
    shape, dtype = t.shape, t.dtype

    def grad_fn(gy):
        g = np.zeros(shape, dtype=dtype)
        g[key] = gy
        return (g,)

    return record(np.ascontiguousarray(out), (t,), grad_fn)


def permute(t, axes):
    """Transpose to the given axis order."""
    t = as_tensor(t)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(
        np.ascontiguousarray(np.transpose(t.data, axes)),
        (t,),
        lambda gy: (np.transpose(gy, inv),),
    )


def chw_to_hwc(t):
    """[C,H,W] -> [H,W,C]."""
    return permute(t, (1, 2, 0))


def hwc_to_chw(t):
    """[H,W,C] -> [C,H,W]."""
    return permute(t, (2, 0, 1))


def _up2_taps(n):
    # output i samples input coordinate i/2 - 0.25 (pixel-center alignment),
    # clamped at the borders
    coords = np.arange(2 * n) * 0.5 - 0.25
    lo = np.floor(coords).astype(np.intp)
    frac = coords - lo
    idx_lo = np.clip(lo, 0, n - 1)
    idx_hi = np.clip(lo + 1, 0, n - 1)
    return idx_lo, idx_hi, frac


def _up2_axis(arr, axis):
    n = arr.shape[axis]
    idx_lo, idx_hi, frac = _up2_taps(n)
    w_shape = [1] * arr.ndim
    w_shape[axis] = 2 * n
    w_hi = frac.astype(arr.dtype).reshape(w_shape)
    w_lo = (1.0 - frac).astype(arr.dtype).reshape(w_shape)
    return np.take(arr, idx_lo, axis=axis) * w_lo + np.take(arr, idx_hi, axis=axis) * w_hi


def _up2_axis_adjoint(gy, axis, n):
    idx_lo, idx_hi, frac = _up2_taps(n)
    g = np.moveaxis(gy, axis, 0)
    w_hi = frac.astype(gy.dtype).reshape((2 * n,) + (1,) * (gy.ndim - 1))
    out = np.zeros((n,) + g.shape[1:], dtype=gy.dtype)
    np.add.at(out, idx_lo, g * (1.0 - w_hi))
    np.add.at(out, idx_hi, g * w_hi)
    return np.moveaxis(out, 0, axis)


def upsample2x(t):
    """Bilinear 2x upsampling of the last two axes (values unchanged)."""
    t = as_tensor(t)
    if t.ndim < 2:
        raise ShapeError(f"upsample2x needs at least 2 dims, got shape {tuple(t.shape)}")
    h, w = t.shape[-2], t.shape[-1]
    out = _up2_axis(_up2_axis(t.data, -2), -1)

    def grad_fn(gy):
        g = _up2_axis_adjoint(gy, -1, w)
        g = _up2_axis_adjoint(g, -2, h)
        return (g,)

    return record(out, (t,), grad_fn)
