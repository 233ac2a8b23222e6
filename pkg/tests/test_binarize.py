import itertools

import numpy as np
import pytest

from xbnn.binarize import (
    binarize_gradient,
    binarize_weights,
    binary_dot_factors,
    compute_beta_map,
    quantize_kbit,
)
from xbnn.bitpack import unpack
from xbnn.tensor import ConvGeometry, sign


def residual(W, B, alpha):
    return float(np.sum((W - alpha * B) ** 2))


def brute_force_min_residual(W):
    """Enumerate all 2^n sign patterns; per pattern the optimal scale is
    max(W.B / n, 0) because the scale is constrained positive."""
    n = W.size
    best = np.inf
    for bits in itertools.product([-1.0, 1.0], repeat=n):
        B = np.array(bits)
        alpha = max(float(W @ B) / n, 0.0)
        best = min(best, residual(W, B, alpha))
    return best


class TestBinarizeWeights:
    def test_hand_example(self):
        f = binarize_weights(np.array([0.5, -1.5, 1.0]))
        np.testing.assert_array_equal(unpack(f.bits), [1.0, -1.0, 1.0])
        assert f.alpha == pytest.approx(1.0)
        W = np.array([0.5, -1.5, 1.0])
        assert residual(W, unpack(f.bits), f.alpha) == pytest.approx(0.5)

    def test_constant_filter_exact(self):
        f = binarize_weights(np.full((2, 2), 0.75))
        assert f.alpha == pytest.approx(0.75)
        np.testing.assert_array_equal(f.dense(), np.full((2, 2), 0.75))

    def test_l1_mean(self):
        assert binarize_weights(np.array([1.0, -2.0, 3.0])).alpha == pytest.approx(2.0)

    def test_all_zero_degenerate(self):
        f = binarize_weights(np.zeros(4))
        assert f.degenerate
        assert f.alpha == 0.0

    def test_brute_force_optimality(self):
        rng = np.random.default_rng(42)
        for _ in range(60):
            n = int(rng.integers(1, 9))
            W = rng.normal(size=n)
            f = binarize_weights(W)
            ours = residual(W, unpack(f.bits), f.alpha)
            assert ours <= brute_force_min_residual(W) + 1e-9

    def test_scale_equivariance(self):
        rng = np.random.default_rng(3)
        W = rng.normal(size=12)
        f1 = binarize_weights(W)
        f2 = binarize_weights(2.5 * W)
        np.testing.assert_array_equal(unpack(f1.bits), unpack(f2.bits))
        assert f2.alpha == pytest.approx(2.5 * f1.alpha)


class TestBinaryDotFactors:
    def test_hand_example(self):
        r = binary_dot_factors([1.0, -2.0], [2.0, 1.0])
        assert r.beta == pytest.approx(1.5)
        assert r.alpha == pytest.approx(1.5)
        assert r.gamma == pytest.approx(2.25)
        assert r.gamma_exact == pytest.approx(2.0)  # the product form overestimates here

    def test_all_ones_exact(self):
        r = binary_dot_factors(np.ones(5), np.ones(5))
        assert r.gamma == pytest.approx(1.0)
        assert r.gamma_exact == pytest.approx(1.0)

    def test_n1_exactness(self):
        r = binary_dot_factors([-1.2], [3.0])
        assert r.gamma == pytest.approx(abs(-1.2 * 3.0))
        assert r.gamma_exact == pytest.approx(r.gamma)

    def test_sign_product_identity(self):
        rng = np.random.default_rng(8)
        X = rng.normal(size=64) + 0.01  # keep away from zero
        W = rng.normal(size=64) - 0.01
        np.testing.assert_array_equal(sign(X) * sign(W), sign(X * W))


class TestBetaMap:
    def test_uniform_input(self):
        K = compute_beta_map(np.ones((1, 3, 3)), ConvGeometry(filt_hw=(2, 2))).K
        np.testing.assert_allclose(K, np.ones((2, 2)))

    def test_single_window_matches_filter_alpha(self):
        rng = np.random.default_rng(4)
        I = rng.normal(size=(3, 4, 5))
        K = compute_beta_map(I, ConvGeometry(filt_hw=(4, 5))).K
        assert K.shape == (1, 1)
        assert K[0, 0] == pytest.approx(binarize_weights(I.reshape(-1)).alpha, rel=1e-6)

    def test_zero_input(self):
        K = compute_beta_map(np.zeros((2, 4, 4)), ConvGeometry(filt_hw=(3, 3))).K
        np.testing.assert_array_equal(K, np.zeros((2, 2)))

    def test_against_per_window_oracle(self):
        rng = np.random.default_rng(5)
        I = rng.normal(size=(4, 9, 7)).astype(np.float32)
        for stride in (1, 2):
            geom = ConvGeometry(filt_hw=(3, 2), stride=stride, pad=0)
            K = compute_beta_map(I, geom).K
            oh, ow = geom.out_hw(I.shape[1:])
            for y in range(oh):
                for x in range(ow):
                    window = I[:, y * stride:y * stride + 3, x * stride:x * stride + 2]
                    expected = np.abs(window).mean()
                    assert K[y, x] == pytest.approx(expected, rel=1e-6)

    def test_padded_border_attenuated(self):
        I = np.ones((1, 4, 4), dtype=np.float32)
        K = compute_beta_map(I, ConvGeometry(filt_hw=(3, 3), pad=1)).K
        assert K[0, 0] == pytest.approx(4 / 9)  # corner window sees 4 real pixels
        assert K[1, 1] == pytest.approx(1.0)

    def test_entries_nonnegative(self):
        rng = np.random.default_rng(6)
        I = rng.normal(size=(2, 8, 8)).astype(np.float32)
        K = compute_beta_map(I, ConvGeometry(filt_hw=(3, 3), pad=2, stride=2)).K
        assert np.all(K >= 0)


class TestQuantizeKbit:
    def test_k1_is_sign_off_ties(self):
        assert quantize_kbit(0.3, 1) == pytest.approx(1.0)
        assert quantize_kbit(-0.3, 1) == pytest.approx(-1.0)
        assert quantize_kbit(0.0, 1) == pytest.approx(1.0)  # tie follows sign(0) = +1

    def test_k2_hand_value(self):
        assert quantize_kbit(0.3, 2) == pytest.approx(1.0 / 3.0)

    def test_endpoints_fixed(self):
        for k in (1, 2, 3, 8):
            assert quantize_kbit(1.0, k) == pytest.approx(1.0)
            assert quantize_kbit(-1.0, k) == pytest.approx(-1.0)

    def test_monotone_and_idempotent(self):
        x = np.linspace(-1, 1, 801)
        for k in (1, 2, 3, 4):
            q = quantize_kbit(x, k)
            assert np.all(np.diff(q) >= 0)
            np.testing.assert_allclose(quantize_kbit(q, k), q, atol=1e-12)

    def test_out_of_range_clamps_with_warning(self):
        with pytest.warns(UserWarning):
            assert quantize_kbit(1.7, 2) == pytest.approx(1.0)

    def test_k1_odd_away_from_ties(self):
        x = np.array([0.9, 0.2, 0.0001])
        np.testing.assert_allclose(quantize_kbit(-x, 1), -quantize_kbit(x, 1))


class TestBinarizeGradient:
    def test_hand_example(self):
        pattern, scale = binarize_gradient(np.array([0.1, -0.4, 0.2]))
        assert scale == pytest.approx(0.4)
        np.testing.assert_array_equal(pattern, [1.0, -1.0, 1.0])

    def test_all_zero(self):
        pattern, scale = binarize_gradient(np.zeros(3))
        assert scale == 0.0
        np.testing.assert_array_equal(pattern, [1.0, 1.0, 1.0])

    def test_single_element(self):
        pattern, scale = binarize_gradient(np.array([-5.0]))
        assert scale == 5.0
        np.testing.assert_array_equal(pattern, [-1.0])
