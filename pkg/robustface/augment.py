"""
Stochastic view sampling for contrastive pre-training.

Three operations applied in order: random square crop resized back to full
size, brightness/contrast jitter, optional Gaussian blur. Images are numpy
arrays [H x W x C] in [0, 1]; every function takes an explicit
``numpy.random.Generator`` so a view is fixed by the generator state.
"""

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale_min: float = 0.7
    jitter_brightness: float = 0.2
    jitter_contrast: float = 0.2
    blur_sigma_max: float = 1.0
    blur_probability: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.crop_scale_min <= 1:
            raise ValueError(f"crop_scale_min must lie in (0, 1], got {self.crop_scale_min}")
        for name in ("jitter_brightness", "jitter_contrast", "blur_sigma_max"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0 <= self.blur_probability <= 1:
            raise ValueError(f"blur_probability must lie in [0, 1], got {self.blur_probability}")


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Corner-aligned bilinear resize of an [h x w x c] array."""
    src_h, src_w = img.shape[:2]
    data = img.astype(np.float64)

    def axis_coords(dst: int, src: int) -> np.ndarray:
        if dst == 1 or src == 1:
            return np.zeros(dst)
        return np.arange(dst) * (src - 1) / (dst - 1)

    yy, xx = np.meshgrid(axis_coords(height, src_h), axis_coords(width, src_w), indexing="ij")
    out = np.stack(
        [ndimage.map_coordinates(data[..., ch], [yy, xx], order=1, mode="nearest") for ch in range(data.shape[2])],
        axis=-1,
    )
    # Interpolation is a convex combination; clipping only removes rounding overshoot.
    return np.clip(out, data.min(), data.max()).astype(img.dtype)


def random_crop_resize(img: np.ndarray, rng: np.random.Generator, crop_scale_min: float = 0.7) -> np.ndarray:
    h, w = img.shape[:2]
    if h < 2 or w < 2:
        raise ValueError(f"random_crop_resize needs H, W >= 2, got {img.shape}")
    side_max = min(h, w)
    side_min = min(side_max, max(1, int(math.ceil(crop_scale_min * side_max - 1e-9))))
    side = int(rng.integers(side_min, side_max + 1))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    crop = img[top: top + side, left: left + side]
    return resize_bilinear(crop, h, w)


def color_jitter(
    img: np.ndarray, rng: np.random.Generator, brightness: float = 0.2, contrast: float = 0.2
) -> np.ndarray:
    """``clamp(c * (img - mean) + mean + b, 0, 1)`` with b, c drawn uniformly."""
    b = rng.uniform(-brightness, brightness)
    c = rng.uniform(1.0 - contrast, 1.0 + contrast)
    data = img.astype(np.float64)
    # Written as img + (c - 1)(img - mean) + b so zero strengths are an exact identity.
    out = data + (c - 1.0) * (data - data.mean()) + b
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def gaussian_kernel(sigma: float) -> np.ndarray:
    size = max(1, int(math.ceil(6.0 * sigma)))
    if size % 2 == 0:
        size += 1
    offsets = np.arange(size) - size // 2
    kernel = np.exp(-(offsets ** 2) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def gaussian_blur(
    img: np.ndarray, rng: np.random.Generator, sigma_max: float = 1.0, probability: float = 0.5
) -> np.ndarray:
    """
    With the given probability, separable Gaussian blur with sigma ~ U(0.1, sigma_max).

    Borders use half-sample symmetric reflection (``d c b a | a b c d``), which
    keeps the sum of the image unchanged.
    """
    apply = rng.random() < probability
    sigma = rng.uniform(0.1, max(0.1, sigma_max))
    if not apply:
        return img
    kernel = gaussian_kernel(sigma)
    data = img.astype(np.float64)
    for axis in (0, 1):
        data = ndimage.convolve1d(data, kernel, axis=axis, mode="reflect")
    return np.clip(data, 0.0, 1.0).astype(img.dtype)


def sample_view(img: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Crop-resize, then color jitter, then blur."""
    view = random_crop_resize(img, rng, config.crop_scale_min)
    view = color_jitter(view, rng, config.jitter_brightness, config.jitter_contrast)
    return gaussian_blur(view, rng, config.blur_sigma_max, config.blur_probability)


def sample_stream(run_seed: int, config: AugmentConfig, epoch: int, index: int) -> np.random.Generator:
    """Per-sample generator; the stream id is the sample index."""
    return np.random.default_rng([int(run_seed), int(config.seed), int(epoch), int(index)])


def augment_batch(
    images: np.ndarray, indices: Iterable[int], config: AugmentConfig, run_seed: int, epoch: int
) -> np.ndarray:
    """One view per image, each drawn from its own (seed, epoch, index) stream."""
    return np.stack(
        [sample_view(images[i], config, sample_stream(run_seed, config, epoch, i)) for i in indices]
    )


def identity_config(seed: int = 0) -> AugmentConfig:
    """An augmentation family that leaves images untouched."""
    return AugmentConfig(
        crop_scale_min=1.0, jitter_brightness=0.0, jitter_contrast=0.0,
        blur_sigma_max=0.0, blur_probability=0.0, seed=seed,
    )

