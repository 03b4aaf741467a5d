import numpy as np
import pytest

from deformreg.errors import ShapeError
from deformreg.ndgrad import Tensor, check_gradients
from deformreg.ndgrad.conv import conv2d, conv2d_transpose
from deformreg.ndgrad.ops import mul, reduce_sum


def test_all_ones_kernel_counts_neighborhood():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = conv2d(x, w, stride=1, padding=1).data[0, 0]
    assert out[1, 1] == 9.0
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0
    assert out[0, 1] == out[1, 0] == 6.0


def test_identity_kernel_preserves_input(rng):
    x = rng.random((1, 1, 6, 6))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = conv2d(Tensor(x), Tensor(k), stride=1, padding=1).data
    assert np.allclose(out, x)


def test_channel_mismatch_reports_dimensions():
    x = Tensor(np.ones((1, 3, 4, 4)))
    w = Tensor(np.ones((2, 2, 3, 3)))
    with pytest.raises(ShapeError, match="3 channels.*expects 2"):
        conv2d(x, w)


def test_strided_output_size():
    x = Tensor(np.zeros((1, 2, 64, 64)))
    w = Tensor(np.zeros((4, 2, 4, 4)))
    assert conv2d(x, w, stride=2, padding=1).shape == (1, 4, 32, 32)


def test_conv2d_gradcheck():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x = rng.random((1, 2, 6, 6))
        w = rng.standard_normal((3, 2, 3, 3)) * 0.5
        b = rng.standard_normal(3) * 0.1

        def loss(xt, wt, bt):
            y = conv2d(xt, wt, bt, stride=1, padding=1)
            return reduce_sum(mul(y, y))

        check_gradients(loss, [x, w, b], step=1e-3, atol=1e-3, rtol=1e-3,
                        max_coords=40, rng=rng)


def test_conv2d_strided_gradcheck(rng):
    x = rng.random((1, 2, 8, 8))
    w = rng.standard_normal((3, 2, 4, 4)) * 0.4

    def loss(xt, wt):
        y = conv2d(xt, wt, stride=2, padding=1)
        return reduce_sum(mul(y, y))

    check_gradients(loss, [x, w], max_coords=40, rng=rng)


def test_transpose_shape_doubles():
    x = Tensor(np.zeros((1, 1, 4, 4)))
    w = Tensor(np.zeros((1, 1, 4, 4)))
    assert conv2d_transpose(x, w, stride=2, padding=1).shape == (1, 1, 8, 8)


def test_transpose_zero_weights_gives_bias():
    x = Tensor(np.random.default_rng(0).random((1, 2, 4, 4)))
    w = Tensor(np.zeros((2, 3, 4, 4)))
    b = Tensor(np.array([1.0, -2.0, 0.5]))
    out = conv2d_transpose(x, w, b, stride=2, padding=1).data
    for k, bias in enumerate([1.0, -2.0, 0.5]):
        assert np.allclose(out[0, k], bias)


def test_transpose_channel_mismatch():
    with pytest.raises(ShapeError, match="2 channels.*expects 3"):
        conv2d_transpose(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 1, 4, 4))))


def test_transpose_gradcheck():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x = rng.random((1, 2, 5, 5))
        w = rng.standard_normal((2, 3, 4, 4)) * 0.4
        b = rng.standard_normal(3) * 0.1

        def loss(xt, wt, bt):
            y = conv2d_transpose(xt, wt, bt, stride=2, padding=1)
            return reduce_sum(mul(y, y))

        check_gradients(loss, [x, w, b], max_coords=40, rng=rng)


def test_transpose_is_adjoint_of_conv(rng):
    # <conv2d(x, w), y> == <x, conv2d_transpose(y, w)>: the conv weight
    # [K,C,kh,kw] doubles as the transpose weight [Cin=K,Cout=C,kh,kw]
    x = rng.random((1, 3, 8, 8))
    w = rng.standard_normal((4, 3, 4, 4))
    y = rng.random((1, 4, 4, 4))
    cx = conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    ty = conv2d_transpose(Tensor(y), Tensor(w), stride=2, padding=1).data
    assert np.isclose(float(np.sum(cx * y)), float(np.sum(x * ty)), rtol=1e-10)
