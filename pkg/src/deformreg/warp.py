"""Differentiable spatial-transformer warping and deformation-field algebra.

Conventions used throughout the package:

* images are [H,W] arrays with row index y (downward) and column index x
  (rightward);
* a deformation field is [H,W,2] with disp[...,0] = dx and disp[...,1] = dy,
  in pixel units at the field's own resolution;
* the warped image samples the moving image at x + u(x), i.e. the field
  lives on the fixed grid and points into the moving image;
* sampling coordinates outside the image clamp to the border.
"""

from __future__ import annotations

import logging

import numpy as np

from .errors import DataFormatError, ShapeError
from .ndgrad import Tensor, as_tensor, record
from .ndgrad.ops import hwc_to_chw, chw_to_hwc, scalar_mul, upsample2x

logger = logging.getLogger("deformreg")


class Image2D:
    """H x W grayscale image with intensities in [0,1].

    Out-of-range intensities are clamped on ingest; ``clamped_count``
    records how many pixels were affected. Non-finite input is rejected.
    """

    __slots__ = ("pixels", "clamped_count")

    def __init__(self, pixels):
        arr = np.asarray(pixels, dtype=np.float32)
        if arr.ndim != 2:
            raise ShapeError(f"Image2D expects a 2-d array, got shape {tuple(arr.shape)}")
        if not np.all(np.isfinite(arr)):
            raise DataFormatError("Image2D: non-finite intensities")
        clamped = np.count_nonzero((arr < 0.0) | (arr > 1.0))
        if clamped:
            logger.warning("Image2D: clamped %d out-of-range intensities to [0,1]", clamped)
            arr = np.clip(arr, 0.0, 1.0)
        self.pixels = arr
        self.clamped_count = int(clamped)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def shape(self):
        return self.pixels.shape

    def to_tensor(self, requires_grad=False):
        return Tensor(self.pixels, requires_grad=requires_grad)

    def __repr__(self):
        return f"Image2D({self.height}x{self.width})"


class DeformationField:
    """Dense per-pixel displacement field, [H,W,2] of (dx, dy) in pixels."""

    __slots__ = ("disp",)

    def __init__(self, disp):
        arr = np.asarray(disp, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 2:
            raise ShapeError(f"DeformationField expects [H,W,2], got shape {tuple(arr.shape)}")
        if not np.all(np.isfinite(arr)):
            raise DataFormatError("DeformationField: non-finite displacements")
        self.disp = arr

    @classmethod
    def zeros(cls, height, width):
        return cls(np.zeros((height, width, 2), dtype=np.float32))

    @property
    def height(self):
        return self.disp.shape[0]

    @property
    def width(self):
        return self.disp.shape[1]

    @property
    def shape(self):
        return self.disp.shape

    def to_tensor(self, requires_grad=False):
        return Tensor(self.disp, requires_grad=requires_grad)

    def max_displacement(self):
        return float(np.max(np.hypot(self.disp[..., 0], self.disp[..., 1]))) if self.disp.size else 0.0

    def __repr__(self):
        return f"DeformationField({self.height}x{self.width})"


def _image_tensor(x):
    if isinstance(x, Image2D):
        return x.to_tensor()
    return as_tensor(x)


def _field_tensor(x):
    if isinstance(x, DeformationField):
        return x.to_tensor()
    return as_tensor(x)


def _sample_weights(moving, xs, ys):
    """Corner indices and bilinear weights for sample points, clamped to border."""
    h, w = moving.shape
    xc = np.clip(xs, 0.0, w - 1.0)
    yc = np.clip(ys, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc), max(w - 2, 0)).astype(np.intp)
    y0 = np.minimum(np.floor(yc), max(h - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xc - x0).astype(xs.dtype)
    fy = (yc - y0).astype(ys.dtype)
    return x0, x1, y0, y1, fx, fy, xc, yc


def bilinear_warp(moving, field):
    """Warp ``moving`` [H,W] by ``field`` [H,W,2]: out(x) = moving(x + u(x)).

    Bilinear sampling with clamp-to-edge; differentiable w.r.t. both the
    moving intensities and the field. A zero field reproduces the moving
    image bitwise.
    """
    moving = _image_tensor(moving)
    field = _field_tensor(field)
    if moving.ndim != 2:
        raise ShapeError(f"bilinear_warp: moving must be [H,W], got {tuple(moving.shape)}")
    if field.ndim != 3 or field.shape[2] != 2:
        raise ShapeError(f"bilinear_warp: field must be [H,W,2], got {tuple(field.shape)}")
    if moving.shape != field.shape[:2]:
        raise ShapeError(
            f"bilinear_warp: image {tuple(moving.shape)} vs field {tuple(field.shape[:2])}"
        )
    h, w = moving.shape
    m = moving.data
    fd = field.data
    cols = np.arange(w, dtype=fd.dtype)
    rows = np.arange(h, dtype=fd.dtype)[:, None]
    xs = cols + fd[..., 0]
    ys = rows + fd[..., 1]
    x0, x1, y0, y1, fx, fy, _, _ = _sample_weights(m, xs, ys)

    ia = m[y0, x0]
    ib = m[y0, x1]
    ic = m[y1, x0]
    idd = m[y1, x1]
    w00 = (1.0 - fy) * (1.0 - fx)
    w01 = (1.0 - fy) * fx
    w10 = fy * (1.0 - fx)
    w11 = fy * fx
    out = w00 * ia + w01 * ib + w10 * ic + w11 * idd

    # clamp subgradient: 1 on the closed interval, 0 beyond it
    in_x = ((xs >= 0.0) & (xs <= w - 1.0)).astype(fd.dtype)
    in_y = ((ys >= 0.0) & (ys <= h - 1.0)).astype(fd.dtype)

    def grad_fn(gy):
        gm = np.zeros_like(m)
        np.add.at(gm, (y0, x0), gy * w00)
        np.add.at(gm, (y0, x1), gy * w01)
        np.add.at(gm, (y1, x0), gy * w10)
        np.add.at(gm, (y1, x1), gy * w11)
        dx = (1.0 - fy) * (ib - ia) + fy * (idd - ic)
        dy = (1.0 - fx) * (ic - ia) + fx * (idd - ib)
        gf = np.stack([gy * dx * in_x, gy * dy * in_y], axis=-1)
        return gm, gf.astype(fd.dtype, copy=False)

    return record(out.astype(m.dtype, copy=False), (moving, field), grad_fn)


def warp_mask(mask, field, threshold=0.5):
    """Warp a binary mask and re-binarize at ``threshold``. Evaluation only."""
    arr = np.asarray(mask.values if hasattr(mask, "values") else mask, dtype=np.float32)
    vals = np.unique(arr)
    if not np.all(np.isin(vals, (0.0, 1.0))):
        raise DataFormatError(f"warp_mask: mask values must be in {{0,1}}, got {vals[:8]}")
    fd = field.disp if isinstance(field, DeformationField) else np.asarray(field)
    warped = bilinear_warp(arr, fd.astype(np.float32, copy=False)).data
    return (warped >= threshold).astype(np.uint8)


def sample_field_at(field, points_xy):
    """Bilinear samples of an [H,W,2] field at (x, y) points, clamped."""
    fd = field.disp if isinstance(field, DeformationField) else np.asarray(field)
    pts = np.atleast_2d(np.asarray(points_xy, dtype=np.float64))
    xs = pts[:, 0]
    ys = pts[:, 1]
    x0, x1, y0, y1, fx, fy, _, _ = _sample_weights(fd[..., 0], xs, ys)
    out = np.empty((pts.shape[0], 2), dtype=np.float64)
    for c in range(2):
        comp = fd[..., c]
        out[:, c] = (
            (1 - fy) * (1 - fx) * comp[y0, x0]
            + (1 - fy) * fx * comp[y0, x1]
            + fy * (1 - fx) * comp[y1, x0]
            + fy * fx * comp[y1, x1]
        )
    return out


def upsample_field(field, factor=2):
    """Upsample a field to double resolution, doubling displacement magnitudes.

    Accepts and returns a Tensor (differentiable) or a DeformationField.
    """
    if factor != 2:
        raise ValueError(f"upsample_field supports factor 2 only, got {factor}")
    if isinstance(field, DeformationField):
        t = upsample_field(field.to_tensor())
        return DeformationField(t.data)
    t = _field_tensor(field)
    if t.ndim != 3 or t.shape[2] != 2:
        raise ShapeError(f"upsample_field: field must be [H,W,2], got {tuple(t.shape)}")
    return scalar_mul(chw_to_hwc(upsample2x(hwc_to_chw(t))), 2.0)


def downsample_field(field):
    """Average-pool a field 2x and halve displacement magnitudes."""
    fd = field.disp if isinstance(field, DeformationField) else np.asarray(field)
    h, w = fd.shape[:2]
    if h % 2 or w % 2:
        raise ShapeError(f"downsample_field: dimensions {h}x{w} not divisible by 2")
    pooled = fd.reshape(h // 2, 2, w // 2, 2, 2).mean(axis=(1, 3), dtype=np.float64)
    out = (0.5 * pooled).astype(fd.dtype)
    return DeformationField(out) if isinstance(field, DeformationField) else out


def invert_field(field, iterations=20, tol=1e-3):
    """Fixed-point inverse: find v with (x+v) + u(x+v) = x.

    Valid for small-displacement fields (max |u| well under min(H,W)/4).
    If the iteration has not converged after ``iterations`` rounds, the
    current estimate is returned and a warning with the residual is logged;
    the caller decides whether to accept it.
    """
    is_df = isinstance(field, DeformationField)
    fd = (field.disp if is_df else np.asarray(field)).astype(np.float64)
    h, w = fd.shape[:2]
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    v = np.zeros_like(fd)
    last_update = np.inf
    for _ in range(iterations):
        sampled = sample_field_at(fd, pts + v.reshape(-1, 2)).reshape(h, w, 2)
        v_new = -sampled
        last_update = float(np.max(np.abs(v_new - v)))
        v = v_new
        if last_update < tol:
            break
    else:
        logger.warning(
            "invert_field: no convergence after %d iterations (last update %.4g px)",
            iterations,
            last_update,
        )
    out = v.astype(np.float32)
    return DeformationField(out) if is_df else out


def composition_residual(field, inverse):
    """max |u(x+v(x)) + v(x)| over the grid: 0 for an exact inverse."""
    fd = field.disp if isinstance(field, DeformationField) else np.asarray(field)
    iv = inverse.disp if isinstance(inverse, DeformationField) else np.asarray(inverse)
    h, w = fd.shape[:2]
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1) + iv.reshape(-1, 2)
    comp = sample_field_at(fd, pts) + iv.reshape(-1, 2)
    return float(np.max(np.abs(comp)))


def apply_to_landmarks(points_xy, field):
    """Map landmarks from moving-image coordinates into warped coordinates.

    The field indexes fixed-grid positions, so landmark transfer goes
    through the field inverse: warped = p + invert(u)(p).
    Out-of-bounds landmarks are rejected with their indices.
    """
    fd = field.disp if isinstance(field, DeformationField) else np.asarray(field)
    pts = np.atleast_2d(np.asarray(points_xy, dtype=np.float64))
    h, w = fd.shape[:2]
    bad = np.nonzero(
        (pts[:, 0] < 0) | (pts[:, 0] > w - 1) | (pts[:, 1] < 0) | (pts[:, 1] > h - 1)
    )[0]
    if bad.size:
        raise DataFormatError(
            f"apply_to_landmarks: landmarks out of bounds at indices {bad.tolist()} "
            f"(image {h}x{w})"
        )
    inv = invert_field(fd)
    return pts + sample_field_at(inv, pts)
