"""Slice conditioning: denoise, crop, resize, and min-max normalize.

Images are resized bilinearly; label masks are always resized with
nearest-neighbor so class codes survive untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from scipy import ndimage

from .dataio import LabelMask
from .errors import ConfigError, DataError

DENOISERS = ("none", "gaussian", "median")


@dataclass
class PreprocessConfig:
    denoiser: str = "none"
    denoise_strength: float = 1.0
    target_size: int = 256
    crop: tuple[int, int, int, int] | None = None  # (row_min, col_min, row_max, col_max), half-open

    def __post_init__(self):
        if self.denoiser not in DENOISERS:
            raise ConfigError(f"unknown denoiser {self.denoiser!r}, expected one of {DENOISERS}")
        if self.denoise_strength <= 0:
            raise ConfigError("denoise_strength must be positive")
        if self.target_size < 32 or self.target_size % 32 != 0:
            raise ConfigError(
                f"target_size must be a multiple of 32 and >= 32, got {self.target_size}"
            )
        if self.crop is not None:
            self.crop = tuple(int(v) for v in self.crop)  # type: ignore[assignment]
            if len(self.crop) != 4:
                raise ConfigError("crop must be (row_min, col_min, row_max, col_max)")


def denoise(slice_raster: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    """Apply the configured denoiser; ``none`` returns the input unchanged."""
    if config.denoiser == "none":
        return slice_raster
    if config.denoiser == "gaussian":
        out = ndimage.gaussian_filter(slice_raster, sigma=config.denoise_strength)
    else:
        size = max(1, int(round(config.denoise_strength)))
        out = ndimage.median_filter(slice_raster, size=size)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def resize_and_normalize(slice_raster: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    """Crop (optional), bilinear-resize to the square target, min-max normalize.

    Constant slices normalize to all zeros; anything else spans [0, 1] exactly.
    """
    arr = np.asarray(slice_raster, dtype=np.float32)
    if arr.ndim != 2 or arr.size == 0:
        raise DataError(f"expected a non-empty 2D slice, got shape {arr.shape}")
    if config.crop is not None:
        r0, c0, r1, c1 = config.crop
        h, w = arr.shape
        if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
            raise DataError(f"crop {config.crop} outside slice bounds {arr.shape}")
        arr = arr[r0:r1, c0:c1]
    size = config.target_size
    if arr.shape != (size, size):
        arr = cv2.resize(arr, (size, size), interpolation=cv2.INTER_LINEAR)
    lo = float(arr.min())
    hi = float(arr.max())
    if hi == lo:
        return np.zeros((size, size), dtype=np.float32)
    return ((arr - lo) / (hi - lo)).astype(np.float32)


def resize_mask(mask: LabelMask, shape: tuple[int, int]) -> LabelMask:
    """Nearest-neighbor resize of a label mask to (height, width)."""
    h, w = shape
    if mask.raster.shape == (h, w):
        return LabelMask(raster=mask.raster.copy())
    out = cv2.resize(mask.raster, (w, h), interpolation=cv2.INTER_NEAREST)
    return LabelMask(raster=out)
