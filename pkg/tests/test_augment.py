"""Tests for augmentation, standardization and mixup."""

import itertools

import numpy as np
import pytest
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from sslkit.augment import (augment, compute_channel_stats, destandardize,
                            jitter_hsv, mixup, standardize)
from sslkit.config import AugmentConfig
from sslkit.exceptions import ConfigError, DataError
from sslkit.utils import one_hot

NO_RANDOMNESS = AugmentConfig(
    flip_prob_h=0.0, flip_prob_v=0.0, hue_delta=0.0, sat_range=(1.0, 1.0), val_range=(1.0, 1.0)
)


class TestAugment:
    """Test the probabilistic transformation."""

    def test_no_op_config_is_identity(self, rng):
        """Disabled flips and jitter with unit standardization return the input."""
        image = rng.random((6, 5, 3))
        assert np.array_equal(augment(image, NO_RANDOMNESS, seed=3), image)

    def test_forced_horizontal_flip_is_an_involution(self, rng):
        """Flipping twice restores the image."""
        config = NO_RANDOMNESS.model_copy(update={"flip_prob_h": 1.0})
        image = rng.random((4, 7, 3))
        once = augment(image, config, seed=0)
        assert np.array_equal(once, image[:, ::-1, :])
        assert np.array_equal(augment(once, config, seed=1), image)

    def test_forced_vertical_flip(self, rng):
        """A vertical flip reverses the rows."""
        config = NO_RANDOMNESS.model_copy(update={"flip_prob_v": 1.0})
        image = rng.random((4, 7, 3))
        assert np.array_equal(augment(image, config, seed=0), image[::-1, :, :])

    def test_deterministic_given_seed(self, rng):
        """The same seed gives the same augmented image."""
        image = rng.random((8, 8, 3))
        config = AugmentConfig()
        assert np.array_equal(augment(image, config, seed=(5, 1, 2)), augment(image, config, seed=(5, 1, 2)))

    def test_randomness_disabled_is_standardization(self, rng):
        """Without flips and jitter only the standardization map remains."""
        config = NO_RANDOMNESS.model_copy(
            update={"standardize_mean": (0.5, 0.4, 0.3), "standardize_std": (0.2, 0.25, 0.5)}
        )
        image = rng.random((4, 4, 3))
        expected = standardize(image, (0.5, 0.4, 0.3), (0.2, 0.25, 0.5))
        assert np.array_equal(augment(image, config, seed=11), expected)
        assert np.array_equal(augment(image, AugmentConfig().without_randomness(), seed=11), image)


class TestColor:
    """Test HSV jitter."""

    def test_red_plus_third_turn_is_green(self):
        """Shifting pure red by 1/3 of the hue circle gives pure green."""
        red = np.array([[[1.0, 0.0, 0.0]]])
        assert np.allclose(jitter_hsv(red, 1.0 / 3.0, 1.0, 1.0), [[[0.0, 1.0, 0.0]]], atol=1e-9)

    def test_hsv_round_trip_on_grid(self):
        """RGB to HSV and back is the identity for non-gray pixels."""
        levels = np.linspace(0.0, 1.0, 17)
        grid = np.array([p for p in itertools.product(levels, repeat=3) if not p[0] == p[1] == p[2]])
        pixels = grid.reshape(-1, 1, 3)
        assert np.allclose(hsv_to_rgb(rgb_to_hsv(pixels)), pixels, atol=1e-9)

    def test_neutral_jitter_is_identity(self, rng):
        """Zero hue shift and unit factors leave colors unchanged."""
        image = rng.random((5, 5, 3))
        assert np.allclose(jitter_hsv(image, 0.0, 1.0, 1.0), image, atol=1e-9)

    def test_saturation_is_clamped(self):
        """Scaled saturation never leaves [0, 1]."""
        out = jitter_hsv(np.array([[[0.9, 0.1, 0.1]]]), 0.0, 5.0, 1.0)
        assert np.all((out >= 0.0) & (out <= 1.0))


class TestStandardization:
    """Test per-channel standardization."""

    def test_round_trip(self, rng):
        """Standardizing then de-standardizing recovers the input."""
        image = rng.random((6, 6, 3))
        mean, std = (0.45, 0.5, 0.55), (0.21, 0.33, 0.17)
        assert np.allclose(destandardize(standardize(image, mean, std), mean, std), image, atol=1e-12)

    def test_zero_std_rejected(self):
        """A zero standard deviation is a configuration error."""
        with pytest.raises(ConfigError, match="standardize_std"):
            standardize(np.zeros((2, 2, 3)), (0, 0, 0), (1.0, 0.0, 1.0))

    def test_channel_stats(self):
        """Statistics are per channel over all pixels; constant channels get std 1."""
        images = np.zeros((2, 2, 2, 3))
        images[0, ..., 0] = 1.0
        images[..., 1] = 0.25
        mean, std = compute_channel_stats(images)
        assert mean == pytest.approx((0.5, 0.25, 0.0))
        assert std == pytest.approx((0.5, 1.0, 1.0))

    def test_channel_stats_of_nothing(self):
        """An empty stack has no statistics."""
        with pytest.raises(DataError):
            compute_channel_stats(np.zeros((0, 4, 4, 3)))


class TestMixup:
    """Test mixup of images and targets."""

    def test_lambda_one_is_identity(self, rng):
        """lambda = 1 leaves the batch unchanged."""
        images = rng.random((4, 3, 3, 3))
        targets = one_hot([0, 1, 2, 0], 3)
        mixed = mixup(images, targets, alpha=0.2, seed=0, lam=1.0)
        assert np.array_equal(mixed.images, images)
        assert np.array_equal(mixed.targets, targets)

    def test_midpoint_of_two_classes(self, rng):
        """lambda = 0.5 on two different one-hot labels gives [0.5, 0.5]."""
        images = rng.random((2, 3, 3, 3))
        mixed = mixup(images, one_hot([0, 1], 2), alpha=0.2, seed=4, lam=0.5)
        assert np.allclose(mixed.targets, 0.5)
        assert np.allclose(mixed.images[0], mixed.images[1])

    def test_targets_stay_distributions(self, rng):
        """Mixed targets sum to one for a drawn lambda."""
        targets = one_hot(rng.integers(0, 5, 16), 5)
        mixed = mixup(rng.random((16, 2, 2, 3)), targets, alpha=0.4, seed=8)
        assert 0.0 <= mixed.lam <= 1.0
        assert np.allclose(mixed.targets.sum(axis=1), 1.0, atol=1e-12)

    def test_partners_are_never_self(self):
        """Every item is mixed with another item."""
        for seed in range(10):
            mixed = mixup(np.zeros((5, 1, 1, 3)), one_hot(range(5), 5), alpha=1.0, seed=seed)
            assert np.all(mixed.partners != np.arange(5))
            assert sorted(mixed.partners.tolist()) == list(range(5))

    def test_pixels_in_convex_hull(self, rng):
        """Each mixed pixel lies between its two source pixels."""
        images = rng.random((6, 4, 4, 3))
        mixed = mixup(images, one_hot(range(6), 6), alpha=0.3, seed=2)
        partner_images = images[mixed.partners]
        low = np.minimum(images, partner_images) - 1e-12
        high = np.maximum(images, partner_images) + 1e-12
        assert np.all((mixed.images >= low) & (mixed.images <= high))

    def test_batch_of_one_rejected(self):
        """Mixup needs two items."""
        with pytest.raises(DataError, match="at least 2"):
            mixup(np.zeros((1, 2, 2, 3)), np.ones((1, 1)), alpha=0.2, seed=0)

    def test_non_positive_alpha_rejected(self):
        """alpha must be positive."""
        with pytest.raises(ConfigError, match="mixup_alpha"):
            mixup(np.zeros((2, 2, 2, 3)), one_hot([0, 1], 2), alpha=0.0, seed=0)
