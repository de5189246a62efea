"""Mask post-processing for the background-removal service: unsharp
masking to steepen mask edges, then opening/closing on the thresholded
support to drop speckles and fill pinholes while keeping soft values
inside the surviving support."""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy import ndimage

# 3x3 elliptical structuring element (the plus-shaped cross).
ELLIPSE_3x3 = np.array([[0, 1, 0],
                        [1, 1, 1],
                        [0, 1, 0]], dtype=bool)


@dataclasses.dataclass(frozen=True)
class PostprocessParams:
    unsharp_sigma: float = 2.0
    unsharp_amount: float = 0.5
    support_threshold: float = 0.5

    def __post_init__(self):
        if self.unsharp_sigma <= 0:
            raise ValueError("unsharp_sigma must be positive")
        if self.unsharp_amount < 0:
            raise ValueError("unsharp_amount must be non-negative")


def unsharp_mask(mask: np.ndarray, sigma: float, amount: float) -> np.ndarray:
    blurred = ndimage.gaussian_filter(mask, sigma=sigma)
    return np.clip(mask + amount * (mask - blurred), 0.0, 1.0)


def open_close_support(support: np.ndarray) -> np.ndarray:
    opened = ndimage.binary_opening(support, structure=ELLIPSE_3x3)
    return ndimage.binary_closing(opened, structure=ELLIPSE_3x3)


def postprocess_mask(mask: np.ndarray,
                     params: PostprocessParams = PostprocessParams()) -> np.ndarray:
    """Sharpen then clean the mask; values outside the cleaned support are
    zeroed, values inside keep their (sharpened) soft values."""
    mask = np.asarray(mask, dtype=np.float64)
    sharp = unsharp_mask(mask, params.unsharp_sigma, params.unsharp_amount)
    support = open_close_support(sharp >= params.support_threshold)
    return np.where(support, sharp, 0.0)
