import numpy as np
import pytest

from deformreg.errors import ConfigError, ShapeError
from deformreg.ndgrad import Tensor, check_gradients
from deformreg.losses import (
    LossConfig,
    Reduction,
    ScaleInputs,
    SmoothVariant,
    edge_weights,
    epe_loss,
    overlap_loss,
    photometric_loss,
    smooth_e,
    smooth_n,
    total_loss,
)
from deformreg.warp import bilinear_warp

from conftest import fractional_field


def column_ramp_field(h, w, step=1.0):
    f = np.zeros((h, w, 2))
    f[..., 0] = np.arange(w)[None, :] * step
    return f


class TestPhotometric:
    def test_identical_zero(self, rng):
        img = rng.random((8, 8))
        assert photometric_loss(Tensor(img), Tensor(img), Reduction.SUM).item() == 0.0

    def test_half_intensity_sum(self):
        warped = Tensor(np.full((4, 4), 0.5))
        fixed = Tensor(np.zeros((4, 4)))
        assert photometric_loss(warped, fixed, Reduction.SUM).item() == 8.0
        assert photometric_loss(warped, fixed, Reduction.MEAN_PER_PIXEL).item() == 0.5

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            photometric_loss(Tensor(np.zeros((4, 4))), Tensor(np.zeros((4, 5))))

    def test_reduction_consistency(self, rng):
        a, b = rng.random((8, 8)), rng.random((8, 8))
        s = photometric_loss(Tensor(a), Tensor(b), Reduction.SUM).item()
        m = photometric_loss(Tensor(a), Tensor(b), Reduction.MEAN_PER_PIXEL).item()
        assert abs(s - m * 64) <= 1e-4 * max(abs(s), 1.0)


class TestSmoothN:
    def test_constant_field_zero(self):
        f = np.full((5, 5, 2), 3.0)
        assert smooth_n(Tensor(f), Reduction.SUM).item() == 0.0

    def test_column_ramp_value(self):
        # dx component = column index: six unit forward differences
        assert smooth_n(Tensor(column_ramp_field(3, 3)), Reduction.SUM).item() == 6.0

    def test_homogeneity(self, rng):
        f = fractional_field(rng, 6, 6)
        base = smooth_n(Tensor(f), Reduction.SUM).item()
        scaled = smooth_n(Tensor(2.5 * f), Reduction.SUM).item()
        assert np.isclose(scaled, 2.5 * base, rtol=1e-6)

    def test_too_small_rejected(self):
        with pytest.raises(ShapeError):
            smooth_n(Tensor(np.zeros((1, 5, 2))))

    def test_reduction_consistency(self, rng):
        f = fractional_field(rng, 6, 7)
        s = smooth_n(Tensor(f), Reduction.SUM).item()
        m = smooth_n(Tensor(f), Reduction.MEAN_PER_PIXEL).item()
        assert abs(s - m * 42) <= 1e-4 * max(abs(s), 1.0)


class TestSmoothE:
    def test_flat_image_equals_smooth_n(self, rng):
        f = fractional_field(rng, 5, 5)
        flat = np.full((5, 5), 0.3)
        se = smooth_e(Tensor(f), Tensor(flat), Reduction.SUM).item()
        sn = smooth_n(Tensor(f), Reduction.SUM).item()
        assert np.isclose(se, sn, rtol=1e-6)

    def test_intensity_step_weights_by_exp_minus_one(self):
        # unit x-ramp field, fixed image with a 1.0 step between columns 1|2
        field = column_ramp_field(4, 4)
        fixed = np.zeros((4, 4))
        fixed[:, 2:] = 1.0
        # x-differences: 3 per row; the middle one crosses the step
        expected = 4 * (1.0 + np.exp(-1.0) + 1.0)
        got = smooth_e(Tensor(field), Tensor(fixed), Reduction.SUM).item()
        assert np.isclose(got, expected, rtol=1e-6)

    def test_zero_field_zero(self, rng):
        img = rng.random((6, 6))
        assert smooth_e(Tensor(np.zeros((6, 6, 2))), Tensor(img), Reduction.SUM).item() == 0.0

    def test_weights_never_exceed_one(self, rng):
        wx, wy = edge_weights(rng.random((9, 9)))
        assert np.all(wx <= 1.0) and np.all(wy <= 1.0)
        assert np.all(wx > 0.0) and np.all(wy > 0.0)

    def test_smooth_e_never_exceeds_smooth_n(self, rng):
        for seed in range(5):
            r = np.random.default_rng(seed)
            f = fractional_field(r, 7, 7)
            img = r.random((7, 7))
            assert (
                smooth_e(Tensor(f), Tensor(img), Reduction.SUM).item()
                <= smooth_n(Tensor(f), Reduction.SUM).item() + 1e-9
            )


class TestOverlap:
    def test_identical_masks_zero(self, rng):
        m = (rng.random((6, 6)) > 0.5).astype(np.float64)
        assert overlap_loss(Tensor(m), Tensor(m), Reduction.SUM).item() == 0.0

    def test_complementary_masks(self):
        a = np.zeros((4, 4))
        b = np.ones((4, 4))
        assert overlap_loss(Tensor(a), Tensor(b), Reduction.SUM).item() == 16.0

    def test_zero_field_warp_matches(self, rng):
        m = (rng.random((8, 8)) > 0.4).astype(np.float32)
        warped = bilinear_warp(m, np.zeros((8, 8, 2), dtype=np.float32))
        assert overlap_loss(warped, Tensor(m), Reduction.SUM).item() == 0.0


class TestTotalLoss:
    def _scale_inputs(self, rng, h, w):
        fixed = rng.random((h, w))
        field = fractional_field(rng, h, w)
        warped = bilinear_warp(rng.random((h, w)), field)
        return ScaleInputs(warped=warped, fixed=Tensor(fixed), field=Tensor(field))

    def test_identity_all_scales_zero(self, rng):
        scales = []
        for h in (8, 4):
            img = rng.random((h, h))
            scales.append(
                ScaleInputs(warped=Tensor(img), fixed=Tensor(img), field=Tensor(np.zeros((h, h, 2))))
            )
        config = LossConfig.default(2)
        total, report = total_loss(scales, config)
        assert total.item() == 0.0
        assert report.total == 0.0

    def test_published_default_weights(self):
        # photometric 8.0 and smoothness 2.0 with alpha 1, beta 0.05 -> 8.1
        warped = Tensor(np.full((4, 4), 0.5))
        fixed = Tensor(np.zeros((4, 4)))
        field = np.zeros((4, 4, 2))
        field[..., 0] = np.arange(4)[None, :] / 6.0  # 12 diffs of 1/6 -> 2.0
        config = LossConfig(
            alpha=[1.0], beta=[0.05], smooth_variant=SmoothVariant.NORMAL, reduction=Reduction.SUM
        )
        total, report = total_loss(
            [ScaleInputs(warped=warped, fixed=fixed, field=Tensor(field))], config
        )
        assert np.isclose(report.photometric[0], 8.0, atol=1e-5)
        assert np.isclose(report.smoothness[0], 2.0, atol=1e-5)
        assert np.isclose(total.item(), 8.1, atol=1e-5)

    def test_doubling_alpha_doubles_photometric_contribution(self, rng):
        scales = [self._scale_inputs(rng, 8, 8)]
        base_cfg = LossConfig(alpha=[1.0], beta=[0.05], smooth_variant=SmoothVariant.NORMAL)
        dbl_cfg = LossConfig(alpha=[2.0], beta=[0.05], smooth_variant=SmoothVariant.NORMAL)
        t1, r1 = total_loss(scales, base_cfg)
        t2, r2 = total_loss(scales, dbl_cfg)
        assert np.isclose(t2.item() - t1.item(), r1.photometric[0], rtol=1e-6)

    def test_scale_count_mismatch(self, rng):
        with pytest.raises(ConfigError):
            total_loss([self._scale_inputs(rng, 8, 8)], LossConfig.default(2))

    def test_report_total_consistent(self, rng):
        scales = [self._scale_inputs(rng, 8, 8), self._scale_inputs(rng, 4, 4)]
        config = LossConfig.default(2)
        total, report = total_loss(scales, config)
        assert abs(report.total - report.recompute_total(config)) < 1e-6

    def test_gradient_through_total(self):
        # total_loss gradient w.r.t. each scale's field vs finite differences
        for seed in range(3):
            rng = np.random.default_rng(seed)
            fixed = rng.random((16, 16))
            moving = rng.random((16, 16))
            config = LossConfig.default(1, reduction=Reduction.SUM)

            def loss(field_t):
                warped = bilinear_warp(Tensor(moving), field_t)
                total, _ = total_loss(
                    [ScaleInputs(warped=warped, fixed=Tensor(fixed), field=field_t)], config
                )
                return total

            field = fractional_field(rng, 16, 16)
            check_gradients(loss, [field], atol=1e-3, rtol=1e-2, max_coords=40, rng=rng)


class TestEpe:
    def test_identical_fields_near_zero(self):
        f = np.random.default_rng(0).random((5, 5, 2))
        assert epe_loss(Tensor(f), Tensor(f)).item() <= 1.01e-8

    def test_constant_3_4_error(self):
        pred = np.zeros((5, 5, 2))
        pred[..., 0] = 3.0
        pred[..., 1] = 4.0
        assert np.isclose(epe_loss(Tensor(pred), Tensor(np.zeros((5, 5, 2)))).item(), 5.0)

    def test_permutation_invariant(self, rng):
        pred = rng.random((6, 6, 2))
        target = rng.random((6, 6, 2))
        base = epe_loss(Tensor(pred), Tensor(target)).item()
        perm = rng.permutation(36)
        ps = pred.reshape(36, 2)[perm].reshape(6, 6, 2)
        ts = target.reshape(36, 2)[perm].reshape(6, 6, 2)
        assert np.isclose(epe_loss(Tensor(ps), Tensor(ts)).item(), base, rtol=1e-12)

    def test_gradcheck(self, rng):
        pred = rng.random((6, 6, 2)) + 0.5
        target = rng.random((6, 6, 2))

        def loss(p):
            return epe_loss(p, Tensor(target))

        check_gradients(loss, [pred], max_coords=30, rng=rng)


class TestLossConfig:
    def test_default_weights_match_published_values(self):
        config = LossConfig.default(7)
        assert config.alpha == [1.0] * 7
        assert config.beta == [0.05] * 7

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            LossConfig(alpha=[1.0], beta=[-0.1])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            LossConfig(alpha=[1.0, 1.0], beta=[0.05])

    def test_nonnegativity_of_all_losses(self, rng):
        f = fractional_field(rng, 6, 6)
        img = rng.random((6, 6))
        assert smooth_n(Tensor(f)).item() >= 0
        assert smooth_e(Tensor(f), Tensor(img)).item() >= 0
        assert photometric_loss(Tensor(img), Tensor(rng.random((6, 6)))).item() >= 0
        assert epe_loss(Tensor(f), Tensor(fractional_field(rng, 6, 6))).item() >= 0
