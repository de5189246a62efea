"""Shared domain types and value-range contracts.

Images are H x W x 3 float arrays in [0, 1] (RGB). Masks are H x W float
arrays in [0, 1]; ground-truth masks are binary at source but may become
soft after bilinear resizing, so they are stored as real maps throughout.
"""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np
from PIL import Image as PILImage

# Probability clip used before logarithms only; values elsewhere are exact.
PROB_EPS = 1e-7

# Ordered side outputs: index 0 = refined map, 1..6 = decoder stages 1..6
# (shallow to deep), 7 = bridge. Without the refinement module the refined
# slot is absent and the set has 7 entries; the plain encoder-decoder
# ablation keeps only decoder stage 1.
NUM_SIDE_OUTPUTS = 8


class CorruptDataError(ValueError):
    """Raised when an image or mask contains non-finite or out-of-range values."""


def validate_image(image: np.ndarray) -> np.ndarray:
    """Check the H x W x 3, finite, [0, 1] contract and return the array."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise CorruptDataError(f"expected H x W x 3 image, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise CorruptDataError("image contains non-finite values")
    if image.min() < 0.0 or image.max() > 1.0:
        raise CorruptDataError("image values outside [0, 1]")
    return image


def validate_mask(mask: np.ndarray) -> np.ndarray:
    """Check the H x W, finite, [0, 1] contract and return the array."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise CorruptDataError(f"expected H x W mask, got shape {mask.shape}")
    if not np.all(np.isfinite(mask)):
        raise CorruptDataError("mask contains non-finite values")
    if mask.min() < 0.0 or mask.max() > 1.0:
        raise CorruptDataError("mask values outside [0, 1]")
    return mask


def clamp_probability(map_, eps: float = PROB_EPS):
    """Clip a probability map to [eps, 1 - eps] for use before logarithms.

    Accepts numpy arrays or torch tensors; non-finite input raises
    CorruptDataError.
    """
    if hasattr(map_, "clamp"):  # torch tensor
        if not bool(map_.isfinite().all()):
            raise CorruptDataError("probability map contains non-finite values")
        return map_.clamp(eps, 1.0 - eps)
    arr = np.asarray(map_)
    if not np.all(np.isfinite(arr)):
        raise CorruptDataError("probability map contains non-finite values")
    return np.clip(arr, eps, 1.0 - eps)


@dataclasses.dataclass(frozen=True)
class Sample:
    """One image/mask pair with its source identity and original size."""

    image: np.ndarray
    mask: np.ndarray
    identifier: str
    original_size: tuple[int, int]

    def __post_init__(self):
        validate_image(self.image)
        validate_mask(self.mask)
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError(
                f"image/mask size mismatch for {self.identifier}: "
                f"{self.image.shape[:2]} vs {self.mask.shape}"
            )


@dataclasses.dataclass(frozen=True)
class MetricReport:
    """The five evaluation measures for one pair or one dataset aggregate."""

    fw_beta: float
    fb_beta: float
    mae: float
    s_alpha: float
    e_phi: float

    def as_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True)
class LossTerms:
    """Per-output loss record; hybrid is the sum of the enabled terms."""

    bce: float
    ssim: float
    iou: float
    hybrid: float


@dataclasses.dataclass(frozen=True)
class LossBreakdown:
    per_output: tuple[LossTerms, ...]
    total: float


def check_side_outputs(maps: Sequence, expected: int) -> None:
    if len(maps) != expected:
        raise ValueError(f"expected {expected} side outputs, got {len(maps)}")
    shapes = {tuple(m.shape[-2:]) for m in maps}
    if len(shapes) != 1:
        raise ValueError(f"side outputs disagree on spatial size: {shapes}")


def load_image(path) -> np.ndarray:
    """Read an 8-bit RGB PNG/JPEG as an H x W x 3 float array in [0, 1]."""
    with PILImage.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def load_mask(path) -> np.ndarray:
    """Read an 8-bit grayscale PNG as an H x W float array in [0, 1]."""
    with PILImage.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    return arr


def save_mask(mask: np.ndarray, path) -> None:
    """Write a [0, 1] map as 8-bit grayscale PNG (round(v * 255))."""
    validate_mask(mask)
    data = np.rint(mask * 255.0).astype(np.uint8)
    PILImage.fromarray(data, mode="L").save(path)


def save_image(image: np.ndarray, path) -> None:
    validate_image(image)
    data = np.rint(image * 255.0).astype(np.uint8)
    PILImage.fromarray(data, mode="RGB").save(path)


def save_cutout(image: np.ndarray, alpha: np.ndarray, path) -> None:
    """Write an RGBA PNG: RGB from the image, alpha from the mask."""
    validate_image(image)
    validate_mask(alpha)
    if image.shape[:2] != alpha.shape:
        raise ValueError("image and alpha sizes differ")
    rgba = np.dstack([
        np.rint(image * 255.0).astype(np.uint8),
        np.rint(alpha * 255.0).astype(np.uint8),
    ])
    PILImage.fromarray(rgba, mode="RGBA").save(path)
