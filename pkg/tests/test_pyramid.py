import numpy as np
import pytest

from deformreg.errors import ShapeError
from deformreg.pyramid import build_pyramid, build_field_pyramid, pad_to_pyramid
from deformreg.warp import Image2D


def test_constant_image_constant_levels():
    pyr = build_pyramid(Image2D(np.full((16, 16), 0.25)), 3)
    assert pyr.scale_count == 3
    for level in pyr.levels:
        assert np.allclose(level.pixels, 0.25)


def test_single_hot_pixel_averages():
    img = np.zeros((4, 4), dtype=np.float32)
    img[1, 2] = 1.0
    pyr = build_pyramid(Image2D(img), 2)
    coarse = pyr[1].pixels
    assert coarse.shape == (2, 2)
    assert coarse[0, 1] == 0.25
    assert coarse.sum() == 0.25


def test_single_level_is_input():
    img = Image2D(np.random.default_rng(0).random((5, 7)))
    pyr = build_pyramid(img, 1)
    assert pyr.scale_count == 1
    assert pyr[0] is img


def test_indivisible_rejected_with_hint():
    with pytest.raises(ShapeError, match="pad"):
        build_pyramid(Image2D(np.zeros((6, 6))), 3)


def test_mean_preserved_across_levels(rng):
    img = rng.random((32, 32)).astype(np.float32)
    pyr = build_pyramid(Image2D(img), 4)
    means = [float(np.mean(lv.pixels, dtype=np.float64)) for lv in pyr.levels]
    for m in means[1:]:
        assert abs(m - means[0]) < 1e-6


def test_two_downsamples_equal_4x4_average(rng):
    img = rng.random((16, 16)).astype(np.float32)
    pyr = build_pyramid(Image2D(img), 3)
    direct = img.reshape(4, 4, 4, 4).mean(axis=(1, 3), dtype=np.float64)
    assert np.max(np.abs(pyr[2].pixels - direct)) < 1e-6


def test_pad_divisible_is_noop(rng):
    img = Image2D(rng.random((16, 16)))
    padded, record = pad_to_pyramid(img, 3)
    assert padded is img
    assert record.empty


def test_pad_130_to_136():
    img = Image2D(np.random.default_rng(1).random((130, 130)))
    padded, record = pad_to_pyramid(img, 4)
    assert padded.shape == (136, 136)
    assert (record.height, record.width) == (130, 130)
    assert not record.empty


def test_pad_roundtrip(rng):
    img = Image2D(rng.random((10, 13)))
    padded, record = pad_to_pyramid(img, 3)
    assert padded.shape == (12, 16)
    back = record.crop_image(padded)
    assert np.array_equal(back.pixels, img.pixels)


def test_field_pyramid_halves_magnitudes():
    f = np.zeros((8, 8, 2), dtype=np.float32)
    f[..., 0] = 4.0
    levels = build_field_pyramid(f, 3)
    assert [lv.shape[0] for lv in levels] == [8, 4, 2]
    assert np.allclose(levels[1][..., 0], 2.0)
    assert np.allclose(levels[2][..., 0], 1.0)
