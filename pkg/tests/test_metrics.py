import math

import numpy as np
import pytest

from dudotrans import metrics, tomo
from dudotrans.metrics import MetricConfig


@pytest.fixture(scope="module")
def shepp():
    return tomo.rasterize_phantom(tomo.SHEPP_LOGAN, tomo.ScanGeometry(num_views=8))


class TestPsnr:
    def test_identical_is_capped(self, shepp):
        assert metrics.psnr(shepp, shepp) == 99.0

    def test_mse_001(self):
        a = np.zeros((10, 10))
        assert metrics.psnr(a + 0.1, a) == pytest.approx(20.0, abs=1e-12)

    def test_mse_one(self):
        a = np.zeros((4, 4))
        assert metrics.psnr(a + 1.0, a) == pytest.approx(0.0, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            metrics.psnr(np.zeros((3, 3)), np.zeros((3, 4)))

    def test_decreases_with_noise_amplitude(self, shepp):
        amps = [0.01, 0.03, 0.1, 0.3]
        means = []
        for amp in amps:
            vals = [metrics.psnr(shepp + amp * np.random.default_rng(s).standard_normal(shepp.shape), shepp)
                    for s in range(10)]
            means.append(np.mean(vals))
        assert all(a > b for a, b in zip(means, means[1:]))


class TestRmse:
    def test_zero(self, shepp):
        assert metrics.rmse(shepp, shepp) == 0.0

    def test_offset(self, shepp):
        assert metrics.rmse(shepp + 0.1, shepp) == pytest.approx(0.1, abs=1e-12)

    def test_identity_with_psnr(self, rng):
        for _ in range(20):
            a, b = rng.random((2, 16, 16))
            r = metrics.rmse(a, b)
            assert abs(metrics.psnr(a, b) - 20 * math.log10(1.0 / r)) < 1e-9


class TestMsSsim:
    def test_self_is_one(self, shepp, rng):
        assert metrics.ms_ssim(shepp, shepp) == pytest.approx(1.0, abs=1e-6)
        noise = rng.random((128, 128))
        assert metrics.ms_ssim(noise, noise) == pytest.approx(1.0, abs=1e-6)

    def test_symmetric(self, shepp, rng):
        other = shepp + 0.2 * rng.standard_normal(shepp.shape)
        assert abs(metrics.ms_ssim(shepp, other) - metrics.ms_ssim(other, shepp)) < 1e-9

    def test_heavy_noise_matches_reference(self, shepp):
        # frozen from tf.image.ssim_multiscale with the same 4 renormalized weights
        noisy = shepp + np.random.default_rng(0).uniform(-0.5, 0.5, shepp.shape)
        assert metrics.ms_ssim(noisy, shepp) == pytest.approx(0.6048588752746582, abs=1e-6)
        assert metrics.ms_ssim(noisy, shepp, MetricConfig(ssim_levels=1)) == pytest.approx(
            0.1317625343799591, abs=1e-6)

    def test_reference_five_levels(self):
        big = tomo.rasterize_phantom(tomo.SHEPP_LOGAN, tomo.ScanGeometry(num_views=8, image_size=(256, 256)))
        rng = np.random.default_rng(0)
        rng.uniform(-0.5, 0.5, (128, 128))
        rng.random((2, 128, 128))
        noisy = big + rng.uniform(-0.5, 0.5, big.shape)
        value, levels = metrics.ms_ssim(noisy, big, return_levels=True)
        assert levels == 5
        assert value == pytest.approx(0.500492513179779, abs=1e-4)

    def test_more_noise_lower_score(self, shepp):
        vals = [metrics.ms_ssim(shepp + np.random.default_rng(0).uniform(-a, a, shepp.shape), shepp)
                for a in (0.05, 0.2, 0.5, 1.0)]
        assert all(x > y for x, y in zip(vals, vals[1:]))

    def test_bounded(self, shepp, rng):
        for amp in (0.01, 0.1, 1.0):
            v = metrics.ms_ssim(shepp + amp * rng.standard_normal(shepp.shape), shepp)
            assert -1.0 <= v <= 1.0

    def test_levels_reduce_for_desk_size(self, shepp):
        value, levels = metrics.ms_ssim(shepp, shepp, return_levels=True)
        assert levels == 4
        assert metrics.feasible_levels((176, 176)) == 5
        assert metrics.feasible_levels((175, 300)) == 4
        assert metrics.feasible_levels((11, 11)) == 1

    def test_too_small(self):
        with pytest.raises(ValueError, match="window"):
            metrics.ms_ssim(np.zeros((10, 10)), np.zeros((10, 10)))

    def test_single_level_is_plain_ssim(self, rng):
        a, b = rng.random((2, 32, 32))
        cfg = MetricConfig(ssim_levels=1)
        g = metrics._gaussian(11, 1.5)
        ssim_val, _ = metrics._ssim_terms(a, b, g, (0.01) ** 2, (0.03) ** 2)
        assert metrics.ms_ssim(a, b, cfg) == pytest.approx(max(ssim_val, 0.0))

    def test_gaussian_window_normalized(self):
        g = metrics._gaussian(11, 1.5)
        assert g.sum() == pytest.approx(1.0)
        assert np.argmax(g) == 5

    @pytest.mark.parametrize("bad", [dict(ssim_kernel=10), dict(ssim_levels=6), dict(data_range=0)])
    def test_config_invariants(self, bad):
        with pytest.raises(ValueError):
            MetricConfig(**bad)
