"""The probabilistic transformation T, standardization and mixup."""

import logging
from dataclasses import dataclass
from typing import Any, Optional, Sequence, Tuple

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .config import AugmentConfig
from .exceptions import ConfigError, DataError, ShapeMismatchError
from .utils import as_generator

logger = logging.getLogger(__name__)


def _pixels(image: Any) -> np.ndarray:
    pixels = np.asarray(getattr(image, "pixels", image), dtype=np.float64)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeMismatchError("image", ("H", "W", 3), pixels.shape)  # type: ignore[arg-type]
    return pixels


def _channel_vector(values: Sequence[float]) -> np.ndarray:
    return np.asarray(values, dtype=np.float64).reshape(3)


def standardize(image: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    """Per-channel (x - mean) / std."""
    std_vec = _channel_vector(std)
    if np.any(std_vec <= 0.0):
        raise ConfigError("augment.standardize_std", tuple(std), "must be positive in every channel")
    return (np.asarray(image, dtype=np.float64) - _channel_vector(mean)) / std_vec  # type: ignore[no-any-return]


def destandardize(image: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    return np.asarray(image, dtype=np.float64) * _channel_vector(std) + _channel_vector(mean)  # type: ignore[no-any-return]


def compute_channel_stats(images: np.ndarray) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    """Dataset-global per-channel mean and population std of an (N, H, W, 3) stack.

    A constant channel gets std 1 so standardization stays defined.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise DataError("cannot compute channel statistics of an empty image stack")
    flat = images.reshape(-1, 3)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    if np.any(std <= 1e-12):
        logger.warning("Constant image channel found; using std 1 for it")
        std = np.where(std <= 1e-12, 1.0, std)
    return tuple(float(m) for m in mean), tuple(float(s) for s in std)


def jitter_hsv(
    image: np.ndarray, hue_shift: float, sat_factor: float, val_factor: float
) -> np.ndarray:
    """Shift hue (mod 1), scale saturation and value, clamp to valid HSV."""
    hsv = rgb_to_hsv(np.clip(image, 0.0, 1.0))
    hsv[..., 0] = np.mod(hsv[..., 0] + hue_shift, 1.0)
    hsv[..., 1] = np.clip(hsv[..., 1] * sat_factor, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * val_factor, 0.0, 1.0)
    return hsv_to_rgb(hsv)  # type: ignore[no-any-return]


def augment(
    image: Any,
    config: AugmentConfig,
    seed: "int | Sequence[int] | np.random.Generator",
) -> np.ndarray:
    """Apply T: horizontal flip, vertical flip, HSV jitter, then standardization.

    All five random numbers are drawn on every call, in that order, so a
    seed always maps to the same decisions whatever the configuration.
    """
    pixels = _pixels(image)
    rng = as_generator(seed)
    flip_h, flip_v = rng.random(2)
    hue_shift = rng.uniform(-config.hue_delta, config.hue_delta)
    sat_factor = rng.uniform(*config.sat_range)
    val_factor = rng.uniform(*config.val_range)

    out = pixels
    if flip_h < config.flip_prob_h:
        out = out[:, ::-1, :]
    if flip_v < config.flip_prob_v:
        out = out[::-1, :, :]
    if not config.is_jitter_free:
        out = jitter_hsv(out, hue_shift, sat_factor, val_factor)
    return standardize(out, config.standardize_mean, config.standardize_std)


@dataclass(frozen=True)
class MixupBatch:
    images: np.ndarray
    targets: np.ndarray
    lam: float
    partners: np.ndarray


def mixup(
    images: np.ndarray,
    targets: np.ndarray,
    alpha: float,
    seed: "int | Sequence[int] | np.random.Generator",
    lam: Optional[float] = None,
) -> MixupBatch:
    """Convex combination of every item with a seed-chosen partner.

    Partners follow a random cycle through the batch, so no item is paired
    with itself.

    ``lam`` overrides the Beta(alpha, alpha) draw; the partner permutation
    is drawn either way.
    """
    images = np.asarray(images, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if images.shape[0] < 2:
        raise DataError(f"mixup needs a batch of at least 2 items, got {images.shape[0]}")
    if images.shape[0] != targets.shape[0]:
        raise ShapeMismatchError("mixup targets", images.shape[0], targets.shape[0])
    if alpha <= 0:
        raise ConfigError("mixup_alpha", alpha, "must be > 0")
    rng = as_generator(seed)
    drawn = float(rng.beta(alpha, alpha))
    order = rng.permutation(images.shape[0])
    partners = np.empty_like(order)
    partners[order] = np.roll(order, -1)
    weight = drawn if lam is None else float(lam)
    return MixupBatch(
        images=weight * images + (1.0 - weight) * images[partners],
        targets=weight * targets + (1.0 - weight) * targets[partners],
        lam=weight,
        partners=partners,
    )
