"""2D convolution and transposed convolution.

Both ops share three numpy kernels: a strided-window gather (im2col), one
big matmul, and a kernel-position scatter (col2im). The transposed conv is
implemented as the exact adjoint of the convolution gather, so the pair
(stride 2, kernel 4, padding 1) doubles the spatial size precisely.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import as_tensor, record


def _out_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _im2col(x, kh, kw, stride, padding):
    """[N,C,H,W] -> ([N*Ho*Wo, C*kh*kw], Ho, Wo)."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(cols, x_shape, kh, kw, stride, padding, ho, wo):
    """Adjoint of _im2col: scatter-add columns back onto the input grid."""
    n, c, h, w = x_shape
    g6 = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    buf = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            buf[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g6[..., i, j]
    if padding:
        return buf[:, :, padding : padding + h, padding : padding + w]
    return buf


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of [N,C,H,W] with weight [K,C,kh,kw].

    Differentiable w.r.t. input, weight and bias. ``padding`` is symmetric
    zero padding; output size is floor((H+2p-kh)/stride)+1.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(
            f"conv2d: expected input [N,C,H,W] and weight [K,C,kh,kw], "
            f"got {tuple(x.shape)} and {tuple(weight.shape)}"
        )
    n, c, h, w = x.shape
    k, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(
            f"conv2d: input has {c} channels but weight expects {cw} "
            f"(input {tuple(x.shape)}, weight {tuple(weight.shape)})"
        )
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} padding={padding}")
    ho, wo = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: output would be empty for input {h}x{w}, kernel {kh}x{kw}")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"conv2d: bias shape {tuple(bias.shape)} != ({k},)")

    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(k, c * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2)

    x_shape = x.data.shape

    def grad_fn(gy):
        gyf = gy.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
        gw = (gyf.T @ cols).reshape(k, c, kh, kw)
        gx = _col2im(gyf @ wmat, x_shape, kh, kw, stride, padding, ho, wo)
        gb = None
        if bias is not None:
            gb = np.sum(gy, axis=(0, 2, 3), dtype=np.float64).astype(gy.dtype)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record(np.ascontiguousarray(out), inputs, grad_fn)


def conv2d_transpose(x, weight, bias=None, stride=1, padding=0):
    """Transposed convolution of [N,C,H,W] with weight [C,K,kh,kw].

    Output spatial size is (H-1)*stride - 2*padding + kh; with stride 2,
    kernel 4, padding 1 this exactly doubles H and W.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(
            f"conv2d_transpose: expected input [N,C,H,W] and weight [C,K,kh,kw], "
            f"got {tuple(x.shape)} and {tuple(weight.shape)}"
        )
    n, c, h, w = x.shape
    cw, k, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(
            f"conv2d_transpose: input has {c} channels but weight expects {cw} "
            f"(input {tuple(x.shape)}, weight {tuple(weight.shape)})"
        )
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d_transpose: invalid stride={stride} padding={padding}")
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d_transpose: output would be empty for input {h}x{w}")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"conv2d_transpose: bias shape {tuple(bias.shape)} != ({k},)")

    wmat = weight.data.reshape(c, k * kh * kw)
    xf = x.data.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    out = _col2im(xf @ wmat, (n, k, ho, wo), kh, kw, stride, padding, h, w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def grad_fn(gy):
        cols_gy, _, _ = _im2col(gy, kh, kw, stride, padding)
        gx = (cols_gy @ wmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        gw = (xf.T @ cols_gy).reshape(c, k, kh, kw)
        gb = None
        if bias is not None:
            gb = np.sum(gy, axis=(0, 2, 3), dtype=np.float64).astype(gy.dtype)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record(out, inputs, grad_fn)
