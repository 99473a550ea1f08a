import numpy as np
import pytest
from hypothesis import given, strategies as st

from deblur_lab import blur_synth as bs
from deblur_lab import classical as cl
from deblur_lab.blur_synth import BlurKernel, DegradationConfig
from deblur_lab.classical import DeconvRequest
from deblur_lab.errors import ParameterError
from deblur_lab.metrics_loss import psnr


def zero_free_kernel():
    """Peaked 5x5 kernel whose spectrum stays well away from zero."""
    v = np.full((5, 5), 0.01)
    v[2, 2] = 1.0
    v[2, 3] = 0.3
    return BlurKernel.from_array(v)


def box_kernel(n=4):
    v = np.zeros((5, 5))
    v[2, :n] = 1.0
    return BlurKernel.from_array(v)


@pytest.fixture
def blurred_pair(text64):
    k = zero_free_kernel()
    return text64, bs.apply_blur(text64, DegradationConfig(k), clip=False), k


class TestSpectral:

    def test_delta_identity(self, text64):
        np.testing.assert_allclose(cl.inverse_filter(text64, BlurKernel.delta(3)), text64, atol=1e-12)

    def test_exact_recovery_unclamped(self, blurred_pair):
        sharp, blurred, k = blurred_pair
        assert np.max(np.abs(cl.inverse_filter(blurred, k, 0.0, clip=False) - sharp)) <= 1e-6
        assert np.max(np.abs(cl.wiener_filter(blurred, k, 0.0, clip=False) - sharp)) <= 1e-6

    def test_inverse_60db(self, blurred_pair):
        sharp, blurred, k = blurred_pair
        assert psnr(cl.inverse_filter(blurred, k, 1e-12), sharp) >= 60

    def test_wiener_40db(self, blurred_pair):
        sharp, blurred, k = blurred_pair
        assert psnr(cl.wiener_filter(blurred, k, 1e-10), sharp) >= 40

    def test_spectral_zero_kernel(self, text64):
        k = box_kernel(4)
        assert np.min(np.abs(bs.psf_to_otf(k.values, (64, 64)))) < 1e-12
        blurred = bs.apply_blur(text64, DegradationConfig(k), clip=False)
        for eps in (0.0, 1e-6):
            out = cl.inverse_filter(blurred, k, eps, clip=False)
            assert np.all(np.isfinite(out))

    def test_nsr_zero_equals_inverse(self, blurred_pair):
        _, blurred, k = blurred_pair
        np.testing.assert_array_equal(cl.wiener_filter(blurred, k, 0.0), cl.inverse_filter(blurred, k, 0.0))

    def test_energy_decreases_with_nsr(self, blurred_pair):
        _, blurred, k = blurred_pair
        energies = [np.sum(cl.wiener_filter(blurred, k, nsr, clip=False) ** 2)
                    for nsr in (1e-4, 1e-2, 1.0, 100.0, 1e6)]
        assert all(a > b for a, b in zip(energies, energies[1:]))
        assert energies[-1] < 1e-6 * energies[0]

    def test_best_nsr_beats_inverse_on_noise(self, text64):
        k = bs.generate_linear_kernel(9, 20, 7)
        noisy = bs.apply_blur(text64, DegradationConfig(k, noise_sigma=0.01, rng_seed=2))
        best = max(psnr(cl.wiener_filter(noisy, k, nsr), text64) for nsr in np.logspace(-6, 0, 13))
        assert best >= psnr(cl.inverse_filter(noisy, k, 0.0), text64)

    def test_negative_params(self, text64):
        with pytest.raises(ParameterError):
            cl.wiener_filter(text64, BlurKernel.delta(3), -1.0)
        with pytest.raises(ParameterError):
            cl.inverse_filter(text64, BlurKernel.delta(3), -1e-3)


class TestRichardsonLucy:

    def test_delta_fixed_point(self, text64):
        y = np.clip(text64, 1e-12, None)
        np.testing.assert_allclose(cl.richardson_lucy(y, BlurKernel.delta(3), 1, clip=False), y, atol=1e-12)

    def test_flux_conservation(self, text64):
        k = bs.generate_trajectory_kernel(15, seed=2)
        y = bs.apply_blur(text64, DegradationConfig(k))
        total = np.maximum(y, cl.RL_FLOOR).sum()
        drift = []
        cl.richardson_lucy(y, k, 100, clip=False, callback=lambda t, x: drift.append(abs(x.sum() - total) / total))
        assert len(drift) == 100 and max(drift) <= 1e-6

    def test_improves_mild_blur(self, fixture_images):
        k = bs.generate_linear_kernel(7, 30, 5)
        wins = 0
        for img in fixture_images:
            y = bs.apply_blur(img, DegradationConfig(k))
            wins += psnr(cl.richardson_lucy(y, k, 50), img) > psnr(y, img)
        assert wins >= 18

    def test_bad_iterations(self, text64):
        with pytest.raises(ParameterError):
            cl.richardson_lucy(text64, BlurKernel.delta(3), 0)


class TestLandweber:

    def test_delta_identity(self, text64):
        np.testing.assert_allclose(cl.landweber(text64, BlurKernel.delta(3), 5, tau=1.5), text64, atol=1e-12)
        assert cl.residual_norm(text64, text64, BlurKernel.delta(3)) <= 1e-20

    @pytest.mark.parametrize("tau", [0.0, 2.0, -1.0, 2.5])
    def test_tau_range(self, text64, tau):
        with pytest.raises(ParameterError):
            cl.landweber(text64, BlurKernel.delta(3), tau=tau)

    def test_residual_monotone(self, fixture_images):
        k = bs.generate_trajectory_kernel(13, seed=4)
        y = bs.apply_blur(fixture_images[0], DegradationConfig(k))
        res = []
        cl.landweber(y, k, 100, 1.0, clip=False, callback=lambda t, x: res.append(cl.residual_norm(x, y, k)))
        assert all(b <= a for a, b in zip(res, res[1:]))


class TestTV:

    def test_objective_monotone(self, fixture_images):
        k = bs.generate_trajectory_kernel(13, seed=6)
        y = bs.apply_blur(fixture_images[1], DegradationConfig(k, noise_sigma=0.01))
        objs = []
        cl.tv_deblur(y, k, lam=0.005, iterations=200, clip=False, callback=lambda t, x, f: objs.append(f))
        assert all(b <= a for a, b in zip(objs, objs[1:]))

    def test_large_lambda_smooths(self):
        r = np.random.default_rng(0)
        y = np.clip(0.5 + r.normal(0, 0.1, (32, 32, 1)), 0, 1)
        out = cl.tv_deblur(y, BlurKernel.delta(3), lam=1.0, iterations=100)
        assert out.var() < y.var()

    def test_lambda_zero_matches_landweber(self, text64):
        k = bs.generate_linear_kernel(9, 60, 7)
        y = bs.apply_blur(text64, DegradationConfig(k))
        a = cl.tv_deblur(y, k, lam=0.0, iterations=30, step=1.0, clip=False)
        b = cl.landweber(y, k, 30, tau=1.0, clip=False)
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestDispatch:

    @pytest.mark.parametrize("method", cl.METHODS)
    def test_shape_and_range(self, method, text64):
        k = bs.generate_linear_kernel(9, 10, 6)
        y = bs.apply_blur(text64, DegradationConfig(k))
        out = cl.deconvolve(DeconvRequest(y, k, method, {"iterations": 5}))
        assert out.shape == y.shape and out.min() >= 0 and out.max() <= 1

    @pytest.mark.parametrize("method", cl.METHODS)
    def test_deterministic(self, method, text64):
        k = bs.generate_linear_kernel(9, 10, 6)
        req = DeconvRequest(text64, k, method, {"iterations": 3})
        assert cl.deconvolve(req).tobytes() == cl.deconvolve(req).tobytes()

    def test_unknown_method(self, text64):
        with pytest.raises(ParameterError):
            DeconvRequest(text64, BlurKernel.delta(3), "blind")

    def test_reflect_rejected(self, text64):
        with pytest.raises(ParameterError):
            DeconvRequest(text64, BlurKernel.delta(3), "wiener", boundary="reflect")

    @given(st.sampled_from(["inverse", "wiener", "landweber", "richardson_lucy"]))
    def test_delta_kernel_identity(self, method):
        img = np.random.default_rng(3).uniform(0.05, 1, (16, 16, 3))
        out = cl.deconvolve(DeconvRequest(img, BlurKernel.delta(3), method, {"nsr": 0.0, "iterations": 2}))
        np.testing.assert_allclose(out, img, atol=1e-12)
