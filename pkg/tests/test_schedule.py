"""Noise schedule contracts and the forward-noising identities."""

import numpy as np
import pytest

from zestdiff.schedule import add_noise, invert_noise, make_schedule
from zestdiff.tensor import ShapeError


class TestMakeSchedule:
    @pytest.mark.parametrize("kind", ["linear-beta", "cosine"])
    def test_endpoints(self, kind):
        s = make_schedule(1000, kind)
        assert s.alpha[0] == 1.0
        assert s.alpha[1000] <= 1e-3

    @pytest.mark.parametrize("kind", ["linear-beta", "cosine"])
    def test_strictly_decreasing(self, kind):
        s = make_schedule(500, kind)
        assert np.all(np.diff(s.alpha) < 0)

    def test_linear_beta_alpha1(self):
        # cumulative product after one step of rate 1e-4
        s = make_schedule(1000, "linear-beta")
        assert s.alpha[1] == pytest.approx(0.9999, abs=1e-12)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="kind"):
            make_schedule(1000, "quadratic")

    def test_small_T_rejected(self):
        with pytest.raises(ValueError, match="T_train"):
            make_schedule(5)

    def test_derived_terms(self):
        s = make_schedule(100)
        np.testing.assert_allclose(s.sqrt_alpha ** 2, s.alpha, rtol=1e-12)
        np.testing.assert_allclose(s.sqrt_one_minus_alpha ** 2, 1 - s.alpha,
                                   rtol=1e-9, atol=1e-15)


class TestAddNoise:
    def setup_method(self):
        self.s = make_schedule(1000)

    def test_t0_returns_x0(self):
        x0 = np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32)
        eps = np.random.default_rng(1).normal(size=(3, 4)).astype(np.float32)
        np.testing.assert_array_equal(add_noise(x0, 0, eps, self.s), x0)

    def test_zero_noise_scales_by_sqrt_alpha(self):
        # pick a t where alpha ~ 0.25 via a crafted schedule
        s = self.s
        t = int(np.argmin(np.abs(s.alpha - 0.25)))
        x0 = np.ones((2, 2), dtype=np.float64)
        out = add_noise(x0, t, np.zeros_like(x0), s)
        np.testing.assert_allclose(out, np.sqrt(s.alpha[t]), rtol=1e-12)

    def test_scalar_hand_evaluation(self):
        # alpha = 0.25: 0.5 * 2 + sqrt(0.75) * 1
        from zestdiff.schedule import NoiseSchedule
        alpha = np.linspace(1.0, 0.0005, 12)
        alpha[0] = 1.0
        alpha[5] = 0.25
        alpha = np.sort(alpha)[::-1].copy()
        s = NoiseSchedule(T_train=11, alpha=alpha)
        t = int(np.where(s.alpha == 0.25)[0][0])
        out = add_noise(np.array([2.0]), t, np.array([1.0]), s)
        assert out[0] == pytest.approx(1.86603, abs=5e-6)

    def test_out_of_range_t_rejected(self):
        x = np.zeros(3)
        with pytest.raises(ValueError, match="t="):
            add_noise(x, 1001, x, self.s)
        with pytest.raises(ValueError, match="t="):
            add_noise(x, -1, x, self.s)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            add_noise(np.zeros((2, 2)), 5, np.zeros((3,)), self.s)

    def test_inversion_identity(self):
        rng = np.random.default_rng(9)
        x0 = rng.normal(size=(3, 8, 8))
        eps = rng.normal(size=(3, 8, 8))
        for t in (1, 250, 500, 999):
            x_t = add_noise(x0, t, eps, self.s)
            np.testing.assert_allclose(invert_noise(x_t, t, eps, self.s), x0,
                                       atol=1e-5)
