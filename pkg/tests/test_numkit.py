import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from zoomrnn.errors import InputError
from zoomrnn.numkit import (
    affine,
    cross_entropy,
    elementwise_avg,
    elementwise_max,
    one_hot,
    relu,
    sigmoid,
    softmax,
    softmax_cross_entropy_grad,
    tanh_,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


class TestAffine:
    def test_identity(self):
        np.testing.assert_array_equal(affine(np.eye(2), [3.0, -1.0], [0.0, 0.0]), [3.0, -1.0])

    def test_zero_matrix_returns_bias(self):
        np.testing.assert_array_equal(affine(np.zeros((2, 2)), [7.0, -4.0], [1.0, 2.0]), [1.0, 2.0])

    def test_hand_arithmetic(self):
        out = affine([[1.0, 2.0], [3.0, 4.0]], [1.0, 1.0], [0.5, -0.5])
        np.testing.assert_array_equal(out, [3.5, 6.5])

    def test_batch_rows(self):
        W = np.array([[1.0, 2.0], [3.0, 4.0]])
        X = np.array([[1.0, 1.0], [0.0, 2.0]])
        out = affine(W, X, np.zeros(2))
        np.testing.assert_array_equal(out[1], affine(W, X[1], np.zeros(2)))

    @pytest.mark.parametrize("W,x,b", [
        (np.eye(2), [1.0, 2.0, 3.0], [0.0, 0.0]),
        (np.eye(2), [1.0, 2.0], [0.0]),
    ])
    def test_dimension_mismatch(self, W, x, b):
        with pytest.raises(InputError):
            affine(W, x, b)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), finite, finite)
    def test_linearity(self, seed, alpha, beta):
        rng = np.random.default_rng(seed)
        W = rng.normal(size=(3, 4))
        x, y = rng.normal(size=4), rng.normal(size=4)
        zero = np.zeros(3)
        lhs = affine(W, alpha * x + beta * y, zero)
        rhs = alpha * affine(W, x, zero) + beta * affine(W, y, zero)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10, rtol=1e-12)


def test_activations_at_known_points():
    assert sigmoid(np.array([0.0]))[0] == 0.5
    assert tanh_(np.array([0.0]))[0] == 0.0
    np.testing.assert_array_equal(relu(np.array([-2.0, 3.0])), [0.0, 3.0])


def test_sigmoid_is_overflow_safe():
    out = sigmoid(np.array([-1000.0, 1000.0]))
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, [0.0, 1.0])


class TestSoftmax:
    @pytest.mark.parametrize("c", [-7.0, 0.0, 3.5, 700.0])
    def test_constant_is_uniform(self, c):
        np.testing.assert_allclose(softmax(np.full(3, c)), np.full(3, 1 / 3), atol=1e-15)

    def test_high_precision_values(self):
        # mpmath at 40 digits
        expected = [0.090030573170380457998, 0.24472847105479765247, 0.66524095577482188953]
        np.testing.assert_allclose(softmax(np.array([1.0, 2.0, 3.0])), expected, rtol=1e-14)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(1, 12), elements=finite), finite)
    def test_shift_invariance_and_sum(self, z, k):
        p = softmax(z)
        assert abs(p.sum() - 1.0) < 1e-12
        assert np.all(p > 0)
        np.testing.assert_allclose(softmax(z + k), p, atol=1e-12)


class TestCrossEntropy:
    def test_perfect_prediction_is_zero(self):
        y = one_hot(2, 4)
        assert cross_entropy(y, y) == 0.0

    def test_uniform_prediction(self):
        assert cross_entropy(np.full(4, 0.25), one_hot(0, 4)) == pytest.approx(math.log(4) / 4, abs=1e-12)
        assert cross_entropy(np.full(4, 0.25), one_hot(0, 4)) == pytest.approx(0.34657359027997265471, abs=1e-15)

    def test_clamped_floor(self):
        p = np.array([1e-12, 1 - 1e-12])
        assert cross_entropy(p, one_hot(0, 2)) == pytest.approx(13.815510557964274104, rel=1e-12)
        p0 = np.array([0.0, 1.0])
        assert cross_entropy(p0, one_hot(0, 2)) == pytest.approx(13.815510557964274104, rel=1e-12)

    def test_rejects_non_one_hot(self):
        with pytest.raises(InputError):
            cross_entropy(np.array([0.5, 0.5]), np.array([0.5, 0.5]))
        with pytest.raises(InputError):
            cross_entropy(np.array([0.5, 0.5]), np.array([1.0, 1.0]))

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(1, 10), elements=finite), st.data())
    def test_non_negative(self, z, data):
        label = data.draw(st.integers(0, z.size - 1))
        assert cross_entropy(softmax(z), one_hot(label, z.size)) >= 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_logit_gradient_matches_central_differences(self, seed):
        rng = np.random.default_rng(seed)
        n = 5
        z = rng.normal(0, 2, size=n)
        y = one_hot(rng.integers(n), n)
        analytic = softmax_cross_entropy_grad(softmax(z), y)
        np.testing.assert_allclose(analytic, (softmax(z) - y) / n)
        h = 1e-5
        numeric = np.empty(n)
        for i in range(n):
            e = np.zeros(n)
            e[i] = h
            numeric[i] = (cross_entropy(softmax(z + e), y) - cross_entropy(softmax(z - e), y)) / (2 * h)
        rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        assert rel.max() < 1e-6


class TestElementwise:
    def test_avg(self):
        v = np.array([0.2, -3.0, 9.0])
        np.testing.assert_array_equal(elementwise_avg(v, v), v)
        np.testing.assert_array_equal(elementwise_avg([0.5], [1.5]), [1.0])

    def test_max(self):
        np.testing.assert_array_equal(elementwise_max([[1.0, 3.0], [2.0, 1.0]]), [2.0, 3.0])

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            elementwise_avg([1.0], [1.0, 2.0])
        with pytest.raises(InputError):
            elementwise_max([[1.0], [1.0, 2.0]])
