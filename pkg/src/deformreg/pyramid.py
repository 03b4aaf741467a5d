"""Multi-resolution image pyramids via 2x2 average pooling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .warp import DeformationField, Image2D


def _avgpool2(arr):
    h, w = arr.shape[:2]
    pooled = arr.reshape(h // 2, 2, w // 2, 2, *arr.shape[2:]).mean(axis=(1, 3), dtype=np.float64)
    return pooled.astype(arr.dtype)


def _check_divisible(h, w, scale_count):
    div = 1 << (scale_count - 1)
    if h % div or w % div:
        pad_h = (-h) % div
        pad_w = (-w) % div
        raise ShapeError(
            f"image {h}x{w} not divisible by 2^{scale_count - 1}={div}; "
            f"pad by ({pad_h}, {pad_w}) to {h + pad_h}x{w + pad_w} (see pad_to_pyramid)"
        )


class ImagePyramid:
    """Image levels ordered finest (the source) to coarsest, each half size."""

    def __init__(self, levels):
        self.levels = list(levels)

    @property
    def scale_count(self):
        return len(self.levels)

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, s):
        return self.levels[s]


def build_pyramid(image, scale_count):
    """Build a ``scale_count``-level pyramid of an Image2D.

    Each coarser level is the 2x2 average pool of the finer one; level 0
    is the source image itself. Dimensions must divide evenly.
    """
    if scale_count < 1:
        raise ValueError(f"scale_count must be >= 1, got {scale_count}")
    arr = image.pixels if isinstance(image, Image2D) else np.asarray(image, dtype=np.float32)
    h, w = arr.shape[:2]
    _check_divisible(h, w, scale_count)
    levels = [arr]
    for _ in range(scale_count - 1):
        levels.append(_avgpool2(levels[-1]))
    if isinstance(image, Image2D):
        return ImagePyramid([image] + [Image2D(a) for a in levels[1:]])
    return ImagePyramid(levels)


def build_array_pyramid(arr, scale_count):
    """Pyramid of a raw array (mask or per-component field data)."""
    return build_pyramid(np.asarray(arr), scale_count).levels


def build_field_pyramid(field, scale_count):
    """Downsample a ground-truth field per level, halving magnitudes each step."""
    from .warp import downsample_field

    fd = field.disp if isinstance(field, DeformationField) else np.asarray(field)
    _check_divisible(fd.shape[0], fd.shape[1], scale_count)
    levels = [fd]
    for _ in range(scale_count - 1):
        levels.append(downsample_field(levels[-1]))
    return levels


@dataclass(frozen=True)
class CropRecord:
    """Original vs padded dimensions of pad_to_pyramid, for exact inversion."""

    height: int
    width: int
    padded_height: int
    padded_width: int

    @property
    def empty(self):
        return self.height == self.padded_height and self.width == self.padded_width

    def crop_image(self, image):
        arr = image.pixels if isinstance(image, Image2D) else np.asarray(image)
        cropped = arr[: self.height, : self.width]
        return Image2D(cropped) if isinstance(image, Image2D) else cropped

    def crop_field(self, field):
        fd = field.disp if isinstance(field, DeformationField) else np.asarray(field)
        cropped = fd[: self.height, : self.width]
        return DeformationField(cropped) if isinstance(field, DeformationField) else cropped


def pad_to_pyramid(image, scale_count):
    """Reflect-pad right/bottom to the next multiple of 2^(scale_count-1).

    Returns (padded image, CropRecord); cropping with the record inverts
    the padding exactly. Already-divisible images pass through unchanged.
    """
    arr = image.pixels if isinstance(image, Image2D) else np.asarray(image)
    h, w = arr.shape[:2]
    div = 1 << (scale_count - 1)
    pad_h = (-h) % div
    pad_w = (-w) % div
    record = CropRecord(h, w, h + pad_h, w + pad_w)
    if pad_h == 0 and pad_w == 0:
        return image, record
    mode = "reflect" if (pad_h < h and pad_w < w) else "edge"
    widths = ((0, pad_h), (0, pad_w)) + ((0, 0),) * (arr.ndim - 2)
    padded = np.pad(arr, widths, mode=mode)
    return (Image2D(padded) if isinstance(image, Image2D) else padded), record
