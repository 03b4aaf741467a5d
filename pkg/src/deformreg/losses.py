"""Registration losses: photometric L1, field smoothness (plain and
edge-aware), mask overlap, the weighted multi-scale total, and the
supervised endpoint-error baseline.

Scale index 0 is the finest scale everywhere (matching pyramid levels and
network output order). The SUM reduction is the literal per-pixel sum;
MEAN_PER_PIXEL divides the same sum by the pixel count H*W of that scale,
which keeps per-scale weights comparable across resolutions.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .ndgrad import Tensor, as_tensor
from .ndgrad.ops import abs_, add, mul, reduce_mean, reduce_sum, scalar_mul, slice_, sqrt_, sub

EPE_EPSILON = 1e-8


class Reduction(Enum):
    SUM = "sum"
    MEAN_PER_PIXEL = "mean"


class SmoothVariant(Enum):
    NORMAL = "normal"
    EDGE = "edge"


@dataclass
class LossConfig:
    """Per-scale weighting of the total loss.

    alpha/beta/gamma are indexed finest scale first. Defaults follow the
    published training setup: alpha 1.0 and beta 0.05 at every scale,
    overlap disabled.
    """

    alpha: Sequence[float]
    beta: Sequence[float]
    smooth_variant: SmoothVariant = SmoothVariant.EDGE
    gamma: Optional[Sequence[float]] = None
    reduction: Reduction = Reduction.MEAN_PER_PIXEL

    def __post_init__(self):
        self.alpha = [float(a) for a in np.atleast_1d(self.alpha)]
        self.beta = [float(b) for b in np.atleast_1d(self.beta)]
        if self.gamma is not None:
            self.gamma = [float(g) for g in np.atleast_1d(self.gamma)]
        n = len(self.alpha)
        if len(self.beta) != n or (self.gamma is not None and len(self.gamma) != n):
            raise ConfigError(
                f"loss weight lists must share one length per scale: "
                f"alpha={len(self.alpha)} beta={len(self.beta)}"
                + (f" gamma={len(self.gamma)}" if self.gamma is not None else "")
            )
        for name, values in (("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma or [])):
            if any(v < 0 for v in values):
                raise ConfigError(f"loss weights must be >= 0, got {name}={values}")

    @property
    def scale_count(self):
        return len(self.alpha)

    @classmethod
    def default(cls, scale_count, smooth_variant=SmoothVariant.EDGE, overlap_weight=None,
                reduction=Reduction.MEAN_PER_PIXEL):
        gamma = [float(overlap_weight)] * scale_count if overlap_weight else None
        return cls(
            alpha=[1.0] * scale_count,
            beta=[0.05] * scale_count,
            smooth_variant=smooth_variant,
            gamma=gamma,
            reduction=reduction,
        )


@dataclass
class LossReport:
    """Unweighted per-scale loss values plus the weighted total."""

    photometric: list = dc_field(default_factory=list)
    smoothness: list = dc_field(default_factory=list)
    overlap: list = dc_field(default_factory=list)
    total: float = 0.0

    def recompute_total(self, config):
        total = 0.0
        for s in range(len(self.photometric)):
            total += config.alpha[s] * self.photometric[s]
            total += config.beta[s] * self.smoothness[s]
            if config.gamma is not None:
                total += config.gamma[s] * self.overlap[s]
        return total


@dataclass
class ScaleInputs:
    """Per-scale tensors entering the total loss.

    ``warped`` is the moving image already warped by that scale's field;
    masks, when present, are real-valued in [0,1] with the moving mask
    warped differentiably (not thresholded).
    """

    warped: Tensor
    fixed: Tensor
    field: Tensor
    warped_mask: Optional[Tensor] = None
    fixed_mask: Optional[Tensor] = None


def _reduce(summed, reduction, pixel_count):
    if reduction is Reduction.SUM:
        return summed
    return scalar_mul(summed, 1.0 / pixel_count)


def photometric_loss(warped, fixed, reduction=Reduction.SUM):
    """L1 distance between the warped moving image and the fixed image."""
    warped, fixed = as_tensor(warped), as_tensor(fixed)
    if warped.shape != fixed.shape:
        raise ShapeError(
            f"photometric_loss: shapes differ: {tuple(warped.shape)} vs {tuple(fixed.shape)}"
        )
    summed = reduce_sum(abs_(sub(warped, fixed)))
    return _reduce(summed, reduction, warped.size)


def _forward_diffs(field):
    fx = sub(slice_(field, (slice(None), slice(1, None))), slice_(field, (slice(None), slice(0, -1))))
    fy = sub(slice_(field, (slice(1, None),)), slice_(field, (slice(0, -1),)))
    return fx, fy


def _check_field(field, op):
    if field.ndim != 3 or field.shape[2] != 2:
        raise ShapeError(f"{op}: field must be [H,W,2], got {tuple(field.shape)}")
    if field.shape[0] < 2 or field.shape[1] < 2:
        raise ShapeError(f"{op}: field must be at least 2x2, got {tuple(field.shape)}")


def smooth_n(field, reduction=Reduction.SUM):
    """L1 penalty on forward differences of both field components.

    Derivatives use the valid region only: d/dx on columns 0..W-2 and
    d/dy on rows 0..H-2, no padding or wraparound.
    """
    field = as_tensor(field)
    _check_field(field, "smooth_n")
    h, w = field.shape[0], field.shape[1]
    dx, dy = _forward_diffs(field)
    summed = add(reduce_sum(abs_(dx)), reduce_sum(abs_(dy)))
    return _reduce(summed, reduction, h * w)


def edge_weights(fixed):
    """exp(-|forward difference|) of a fixed image, per direction.

    Returns (wx [H,W-1], wy [H-1,W]) as plain arrays: the weights are
    constants and no gradient flows into the fixed image through them.
    """
    arr = np.asarray(fixed.data if isinstance(fixed, Tensor) else fixed)
    wx = np.exp(-np.abs(arr[:, 1:] - arr[:, :-1]))
    wy = np.exp(-np.abs(arr[1:, :] - arr[:-1, :]))
    return wx, wy


def smooth_e(field, fixed, reduction=Reduction.SUM):
    """Edge-aware smoothness: field gradients downweighted at image edges."""
    field = as_tensor(field)
    _check_field(field, "smooth_e")
    arr = np.asarray(fixed.data if isinstance(fixed, Tensor) else fixed)
    if arr.shape != field.shape[:2]:
        raise ShapeError(
            f"smooth_e: fixed image {tuple(arr.shape)} vs field {tuple(field.shape[:2])}"
        )
    h, w = field.shape[0], field.shape[1]
    wx, wy = edge_weights(arr)
    wx2 = Tensor(np.repeat(wx[..., None], 2, axis=-1).astype(field.dtype))
    wy2 = Tensor(np.repeat(wy[..., None], 2, axis=-1).astype(field.dtype))
    dx, dy = _forward_diffs(field)
    summed = add(reduce_sum(mul(abs_(dx), wx2)), reduce_sum(mul(abs_(dy), wy2)))
    return _reduce(summed, reduction, h * w)


def overlap_loss(warped_mask, fixed_mask, reduction=Reduction.SUM):
    """L1 mismatch between a (softly) warped moving mask and the fixed mask."""
    warped_mask, fixed_mask = as_tensor(warped_mask), as_tensor(fixed_mask)
    if warped_mask.shape != fixed_mask.shape:
        raise ShapeError(
            f"overlap_loss: shapes differ: {tuple(warped_mask.shape)} vs {tuple(fixed_mask.shape)}"
        )
    summed = reduce_sum(abs_(sub(warped_mask, fixed_mask)))
    return _reduce(summed, reduction, warped_mask.size)


def smoothness_loss(field, fixed, variant, reduction=Reduction.SUM):
    if variant is SmoothVariant.EDGE:
        return smooth_e(field, fixed, reduction)
    return smooth_n(field, reduction)


def total_loss(scales, config):
    """Weighted multi-scale sum: sum_s alpha_s*photo + beta_s*smooth (+gamma_s*overlap).

    ``scales`` holds one ScaleInputs per scale, finest first, matching the
    config's weight lists. Returns (scalar Tensor, LossReport); the report
    carries the unweighted per-scale values.
    """
    if len(scales) != config.scale_count:
        raise ConfigError(
            f"total_loss: {len(scales)} scales supplied but config has {config.scale_count}"
        )
    report = LossReport()
    total = None
    for s, inputs in enumerate(scales):
        photo = photometric_loss(inputs.warped, inputs.fixed, config.reduction)
        smooth = smoothness_loss(inputs.field, inputs.fixed, config.smooth_variant, config.reduction)
        report.photometric.append(photo.item())
        report.smoothness.append(smooth.item())
        term = add(scalar_mul(photo, config.alpha[s]), scalar_mul(smooth, config.beta[s]))
        if config.gamma is not None and inputs.warped_mask is not None and inputs.fixed_mask is not None:
            ov = overlap_loss(inputs.warped_mask, inputs.fixed_mask, config.reduction)
            report.overlap.append(ov.item())
            term = add(term, scalar_mul(ov, config.gamma[s]))
        else:
            report.overlap.append(0.0)
        total = term if total is None else add(total, term)
    report.total = total.item()
    return total, report


def epe_loss(predicted, target):
    """Endpoint error: per-pixel Euclidean distance between two fields,
    averaged over all pixels. A tiny epsilon keeps the gradient finite at
    zero error."""
    predicted, target = as_tensor(predicted), as_tensor(target)
    if predicted.shape != target.shape:
        raise ShapeError(
            f"epe_loss: shapes differ: {tuple(predicted.shape)} vs {tuple(target.shape)}"
        )
    if predicted.ndim != 3 or predicted.shape[2] != 2:
        raise ShapeError(f"epe_loss: fields must be [H,W,2], got {tuple(predicted.shape)}")
    d = sub(predicted, target)
    ddx = slice_(d, (slice(None), slice(None), 0))
    ddy = slice_(d, (slice(None), slice(None), 1))
    sq = add(mul(ddx, ddx), mul(ddy, ddy))
    eps2 = Tensor(np.full(sq.shape, EPE_EPSILON**2, dtype=sq.dtype))
    return reduce_mean(sqrt_(add(sq, eps2)))
