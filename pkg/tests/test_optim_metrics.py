"""Adam stepper and the PSNR/MSE metrics."""

import math

import numpy as np
import pytest

from sair.metrics import mse, psnr
from sair.optim import AdamState, adam_step


class TestAdam:
    def test_first_step_is_minus_lr(self):
        state = AdamState.init(np.zeros(1))
        out = adam_step(state, np.ones(1), lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, t=1)
        # Bias correction makes m-hat = g and v-hat = g^2 on step one.
        assert out.params[0] == pytest.approx(-0.1, rel=1e-6)

    def test_zero_gradient_leaves_params(self):
        state = AdamState.init(np.array([1.5, -2.0]))
        out = adam_step(state, np.zeros(2), lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, t=1)
        np.testing.assert_array_equal(out.params, [1.5, -2.0])

    def test_deterministic(self, rng):
        p = rng.normal(size=8)
        g = rng.normal(size=8)
        a = adam_step(AdamState.init(p), g, lr=0.05, beta1=0.9, beta2=0.999, eps=1e-8, t=1)
        b = adam_step(AdamState.init(p), g, lr=0.05, beta1=0.9, beta2=0.999, eps=1e-8, t=1)
        np.testing.assert_array_equal(a.params, b.params)
        np.testing.assert_array_equal(a.m, b.m)
        np.testing.assert_array_equal(a.v, b.v)

    def test_non_finite_gradient_rejected(self):
        state = AdamState.init(np.zeros(2))
        with pytest.raises(ValueError):
            adam_step(state, np.array([1.0, np.nan]), lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, t=1)

    def test_descends_a_quadratic(self):
        state = AdamState.init(np.array([3.0]))
        for t in range(1, 200):
            g = 2.0 * state.params
            state = adam_step(state, g, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, t=t)
        assert abs(state.params[0]) < 0.05


class TestMetrics:
    def test_equal_images_give_inf(self, rng):
        img = rng.uniform(size=(4, 4, 3))
        assert math.isinf(psnr(img, img.copy()))

    def test_hand_value(self):
        a = np.zeros((4, 4, 3))
        b = np.full((4, 4, 3), 0.5)
        assert psnr(a, b) == pytest.approx(10 * math.log10(1 / 0.25), abs=1e-9)

    def test_symmetric(self, rng):
        a = rng.uniform(size=(4, 4, 3))
        b = rng.uniform(size=(4, 4, 3))
        assert psnr(a, b) == pytest.approx(psnr(b, a), rel=1e-12)

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(ValueError):
            psnr(rng.uniform(size=(4, 4, 3)), rng.uniform(size=(2, 2, 3)))

    def test_mse_matches_numpy(self, rng):
        a = rng.uniform(size=(4, 4, 3))
        b = rng.uniform(size=(4, 4, 3))
        assert mse(a, b) == pytest.approx(float(np.mean((a - b) ** 2)), rel=1e-12)
