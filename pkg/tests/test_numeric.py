"""Tests for the dense numeric primitives."""

import numpy as np
import pytest

from sslkit.exceptions import NumericalError, ShapeMismatchError
from sslkit.numeric import (finite_diff_check, l2_normalize,
                            l2_normalize_backward, log_softmax, matmul,
                            relu_backward, softmax, softmax_backward)


class TestSoftmax:
    """Test softmax and log-softmax."""

    def test_rows_are_distributions(self, rng):
        """Each row of softmax sums to one and is positive."""
        probs = softmax(rng.normal(size=(5, 7)))
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(probs > 0)

    def test_known_value(self):
        """softmax([1, 0]) = [e/(e+1), 1/(e+1)]."""
        probs = softmax(np.array([[1.0, 0.0]]))
        assert probs[0, 0] == pytest.approx(0.7310585786, abs=1e-9)
        assert probs[0, 1] == pytest.approx(0.2689414214, abs=1e-9)

    def test_large_logits_do_not_overflow(self):
        """Max subtraction keeps huge logits finite."""
        probs = softmax(np.array([[1000.0, 999.0, -1000.0]]))
        assert np.all(np.isfinite(probs))
        assert probs[0, 2] == 0.0

    def test_shift_invariance(self, rng):
        """Adding a constant to a row leaves softmax unchanged."""
        logits = rng.normal(size=(3, 4))
        shifted = logits + np.array([[1e6], [-3.0], [12.5]])
        assert np.allclose(softmax(logits), softmax(shifted), atol=1e-8)

    def test_log_softmax_matches_log_of_softmax(self, rng):
        """log_softmax agrees with log(softmax)."""
        logits = rng.normal(size=(4, 6))
        assert np.allclose(log_softmax(logits), np.log(softmax(logits)), atol=1e-12)

    def test_empty_logits_rejected(self):
        """Empty input raises a numerical error."""
        with pytest.raises(NumericalError, match="empty logits"):
            softmax(np.zeros((2, 0)))

    def test_non_finite_logits_rejected(self):
        """NaN logits raise a numerical error."""
        with pytest.raises(NumericalError):
            softmax(np.array([[0.0, np.nan]]))

    def test_softmax_backward_matches_finite_differences(self, rng):
        """The vector-Jacobian product of softmax is correct."""
        logits = rng.normal(size=(2, 4))
        upstream = rng.normal(size=(2, 4))
        analytic = softmax_backward(softmax(logits), upstream)
        report = finite_diff_check(
            lambda x: float(np.sum(softmax(x) * upstream)), analytic, logits, floor=1e-4
        )
        assert report.max_rel_error < 1e-6


class TestNormalization:
    """Test L2 normalization and its gradient."""

    def test_unit_norm(self, rng):
        """Rows have unit norm after normalization."""
        unit = l2_normalize(rng.normal(size=(6, 3)))
        assert np.allclose(np.linalg.norm(unit, axis=1), 1.0, atol=1e-12)

    def test_degenerate_vector(self):
        """A zero vector cannot be normalized."""
        with pytest.raises(NumericalError, match="degenerate vector"):
            l2_normalize(np.zeros((1, 3)))

    def test_idempotent(self, rng):
        """Normalizing a unit vector leaves it unchanged."""
        unit = l2_normalize(rng.normal(size=(20, 7)) * rng.uniform(0.01, 100.0, size=(20, 1)))
        assert np.allclose(l2_normalize(unit), unit, rtol=0.0, atol=1e-14)

    def test_scale_invariant(self, rng):
        """Positive rescaling of a row does not change its direction."""
        raw = rng.normal(size=(5, 4))
        assert np.allclose(l2_normalize(raw * 37.5), l2_normalize(raw), rtol=0.0, atol=1e-14)

    def test_backward_matches_finite_differences(self, rng):
        """The normalization gradient matches central differences."""
        raw = rng.normal(size=(3, 4))
        upstream = rng.normal(size=(3, 4))
        analytic = l2_normalize_backward(raw, upstream)
        report = finite_diff_check(
            lambda x: float(np.sum(l2_normalize(x) * upstream)), analytic, raw, floor=1e-4
        )
        assert report.max_rel_error < 1e-6


class TestMatmul:
    """Test the shape-checked product."""

    def test_product(self):
        """Matches the numpy product."""
        a = np.arange(6.0).reshape(2, 3)
        b = np.ones((3, 2))
        assert np.array_equal(matmul(a, b), a @ b)

    def test_matches_triple_loop(self, rng):
        """Random 10 x 10 products equal the textbook triple loop."""
        for _ in range(5):
            a = rng.normal(size=(10, 10))
            b = rng.normal(size=(10, 10))
            expected = np.zeros((10, 10))
            for i in range(10):
                for j in range(10):
                    for k in range(10):
                        expected[i, j] += a[i, k] * b[k, j]
            assert np.allclose(matmul(a, b), expected, rtol=0.0, atol=1e-12)

    def test_inner_dimension_mismatch(self):
        """Mismatched inner dimensions name both sizes."""
        with pytest.raises(ShapeMismatchError, match="expected dimensions 3, got 2"):
            matmul(np.ones((2, 3)), np.ones((2, 2)))

    def test_relu_backward_masks_negative(self):
        """Gradient flows only where the pre-activation is positive."""
        grad = relu_backward(np.array([-1.0, 0.0, 2.0]), np.array([5.0, 5.0, 5.0]))
        assert np.array_equal(grad, [0.0, 0.0, 5.0])


class TestFiniteDifference:
    """Test the gradient checker itself."""

    def test_exact_gradient_of_quadratic(self):
        """The gradient of sum(x^2) is 2x."""
        point = np.array([[1.0, -2.0], [0.5, 3.0]])
        report = finite_diff_check(lambda x: float(np.sum(x**2)), 2 * point, point)
        assert report.max_rel_error < 1e-8
        assert report.n_coordinates == 4

    def test_reports_worst_coordinate(self):
        """A wrong gradient entry is located."""
        point = np.array([1.0, 2.0, 3.0])
        wrong = 2 * point
        wrong[1] = 0.0
        report = finite_diff_check(lambda x: float(np.sum(x**2)), wrong, point)
        assert report.worst_coordinate == (1,)
        assert report.max_rel_error == pytest.approx(1.0)

    def test_point_is_not_modified(self):
        """The probe restores every coordinate."""
        point = np.array([0.25, -0.75])
        copy = point.copy()
        finite_diff_check(lambda x: float(np.sum(x**3)), 3 * point**2, point)
        assert np.array_equal(point, copy)

    def test_non_finite_probe(self):
        """A function that blows up raises a numerical error naming the coordinate."""
        with pytest.raises(NumericalError, match="coordinate"):
            finite_diff_check(lambda x: float(np.log(x[0])), np.array([1.0]), np.array([0.0]))

    def test_shape_mismatch(self):
        """Analytic gradient and point must agree in shape."""
        with pytest.raises(ShapeMismatchError):
            finite_diff_check(lambda x: 0.0, np.zeros(3), np.zeros(2))
