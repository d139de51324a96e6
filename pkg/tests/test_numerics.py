"""Autodiff core: tape mechanics, values, and error paths.

Gradient correctness for every op lives in the finite-difference suite
(sair.gradcheck), exercised by the acceptance tests; these tests cover
the engine's bookkeeping and the numeric contracts of the ops.
"""

import numpy as np
import pytest

from sair import numerics as nm
from sair.numerics import (
    Array,
    DegenerateVectorError,
    GradientTape,
    NonFiniteError,
)


class TestTape:
    def test_backward_accumulates_into_leaf(self):
        x = nm.array([1.0, 2.0, 3.0], requires_grad=True)
        with GradientTape() as tape:
            loss = nm.sqnorm(x)
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_shared_subexpression_sums_gradients(self):
        x = nm.array([2.0], requires_grad=True)
        with GradientTape() as tape:
            y = x + x
            loss = (y * y).sum()
        tape.backward(loss)
        # d/dx (2x)^2 = 8x
        np.testing.assert_allclose(x.grad, [16.0])

    def test_ops_outside_tape_record_nothing(self):
        x = nm.array([1.0], requires_grad=True)
        _ = x * 3.0
        with GradientTape() as tape:
            loss = (x * 2.0).sum()
        assert tape.num_recorded > 0
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [2.0])

    def test_detach_blocks_gradient(self):
        x = nm.array([3.0], requires_grad=True)
        with GradientTape() as tape:
            loss = (x.detach() * x).sum()
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [3.0])

    def test_constant_never_collects_grad(self):
        c = nm.constant([1.0, 2.0])
        x = nm.array([1.0, 1.0], requires_grad=True)
        with GradientTape() as tape:
            loss = (c * x).sum()
        tape.backward(loss)
        assert c.grad is None
        np.testing.assert_allclose(x.grad, [1.0, 2.0])


class TestValues:
    def test_float64_everywhere(self):
        x = nm.array(np.float32([1, 2]))
        assert x.data.dtype == np.float64

    def test_mean_abs_sum(self):
        x = nm.constant([[-1.0, 2.0], [3.0, -4.0]])
        assert x.abs().sum().item() == 10.0
        assert x.mean().item() == 0.0

    def test_cumsum_matches_numpy(self, rng):
        data = rng.normal(size=(4, 5))
        got = nm.cumsum(nm.constant(data), axis=1).data
        np.testing.assert_allclose(got, np.cumsum(data, axis=1))

    def test_cosine_of_parallel_and_orthogonal(self):
        a = nm.constant([1.0, 0.0])
        assert nm.cosine_similarity(a, nm.constant([2.0, 0.0])).item() == pytest.approx(1.0)
        assert nm.cosine_similarity(a, nm.constant([0.0, 5.0])).item() == pytest.approx(0.0)

    def test_soft_round_tracks_round_away_from_kinks(self, rng):
        # Smooth rounding transitions near half-integers; sample clear of them.
        base = rng.integers(-3, 4, size=64).astype(np.float64)
        frac = rng.uniform(0.1, 0.35, size=64) * rng.choice([-1.0, 1.0], size=64)
        x = base + frac
        got = nm.soft_round(nm.constant(x)).data
        np.testing.assert_allclose(got, base, atol=0.05)

    def test_resize_identity_when_shape_unchanged(self, rng):
        img = rng.uniform(size=(9, 7, 3))
        out = nm.resize_bilinear(nm.constant(img), (9, 7)).data
        np.testing.assert_array_equal(out, img)

    def test_downsample_area_averages_tiles(self):
        img = np.arange(16, dtype=np.float64).reshape(4, 4, 1) / 16.0
        out = nm.downsample_area(nm.constant(np.repeat(img, 3, axis=2)), 2).data
        expect = img.reshape(2, 2, 2, 2, 1).mean(axis=(1, 3))
        np.testing.assert_allclose(out, np.repeat(expect, 3, axis=2))

    def test_dct8_roundtrip(self, rng):
        block = rng.uniform(size=(8, 8))
        fwd = nm.dct8_blocks(nm.constant(block))
        back = nm.dct8_blocks(fwd, inverse=True).data
        np.testing.assert_allclose(back, block, atol=1e-12)


class TestErrors:
    def test_mismatched_shapes_rejected(self):
        with pytest.raises(ValueError):
            nm.add(nm.constant([1.0, 2.0]), nm.constant([1.0, 2.0, 3.0]))

    def test_non_finite_input_raises(self):
        with pytest.raises(NonFiniteError):
            nm.sigmoid(nm.constant([1.0, np.nan]))

    def test_cosine_rejects_zero_vector(self):
        with pytest.raises(DegenerateVectorError):
            nm.cosine_similarity(nm.constant([0.0, 0.0]), nm.constant([1.0, 0.0]))

    def test_channel_index_out_of_range(self, rng):
        img = nm.constant(rng.uniform(size=(4, 4, 3)))
        with pytest.raises(ValueError):
            nm.channel(img, 3)


class TestArrayBasics:
    def test_item_requires_scalar(self):
        with pytest.raises(ValueError):
            nm.constant([1.0, 2.0]).item()

    def test_reshape_and_flatten(self):
        x = nm.constant(np.arange(6.0))
        assert x.reshape((2, 3)).shape == (2, 3)
        assert x.reshape((2, 3)).flatten().shape == (6,)

    def test_repr_mentions_shape(self):
        assert "2" in repr(nm.constant([1.0, 2.0]))

    def test_array_copies_requires_grad_flag(self):
        x = nm.array([1.0], requires_grad=True)
        assert x.requires_grad
        assert isinstance(x, Array)
