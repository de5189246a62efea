"""Corpus scanning, flip augmentation, and train/eval transforms.

Images are bilinearly resized to 320x320 and randomly cropped to 288x288
during training (identical crop offsets for image and mask); at eval time
the input is resized to 320x320 and the predicted map is resized back to
the original size. Ground-truth masks stay soft after resizing; only the
image is normalized.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .core import Sample, load_image, load_mask

TRAIN_RESIZE = 320
TRAIN_CROP = 288

# Channel statistics of the classification corpus the encoder initialization
# comes from; configurable because masks must never be normalized.
NORMALIZE_MEAN = (0.485, 0.456, 0.406)
NORMALIZE_STD = (0.229, 0.224, 0.225)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclasses.dataclass(frozen=True)
class DatasetSpec:
    image_dir: Path
    mask_dir: Path
    split: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "image_dir", Path(self.image_dir))
        object.__setattr__(self, "mask_dir", Path(self.mask_dir))
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {self.split!r}")


class PairingError(ValueError):
    """An image or mask without a matching filename stem."""


def scan_pairs(spec: DatasetSpec) -> list[tuple[str, Path, Path]]:
    """Pair images and masks by filename stem, in lexicographic stem order.

    Returns (stem, image_path, mask_path) triples; unpaired files raise
    PairingError naming every offender.
    """
    if not spec.image_dir.is_dir():
        raise FileNotFoundError(f"image directory not found: {spec.image_dir}")
    if not spec.mask_dir.is_dir():
        raise FileNotFoundError(f"mask directory not found: {spec.mask_dir}")
    images = {p.stem: p for p in spec.image_dir.iterdir()
              if p.suffix.lower() in IMAGE_SUFFIXES}
    masks = {p.stem: p for p in spec.mask_dir.iterdir()
             if p.suffix.lower() in IMAGE_SUFFIXES}
    unmatched = sorted(set(images) ^ set(masks))
    if unmatched:
        raise PairingError(f"unpaired stems: {', '.join(unmatched)}")
    return [(stem, images[stem], masks[stem]) for stem in sorted(images)]


def load_sample(stem: str, image_path: Path, mask_path: Path) -> Sample:
    image = load_image(image_path)
    mask = load_mask(mask_path)
    return Sample(image=image, mask=mask, identifier=stem,
                  original_size=image.shape[:2])


def hflip_sample(sample: Sample) -> Sample:
    return Sample(image=sample.image[:, ::-1].copy(),
                  mask=sample.mask[:, ::-1].copy(),
                  identifier=sample.identifier + "_flip",
                  original_size=sample.original_size)


def augment_hflip(samples: list[Sample]) -> list[Sample]:
    """Double the corpus with mirrored copies, originals first."""
    return list(samples) + [hflip_sample(s) for s in samples]


def _to_chw(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).to(torch.float32)


def _resize_image(t: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    return F.interpolate(t.unsqueeze(0), size=size, mode="bilinear",
                         align_corners=False).squeeze(0)


def normalize_image(t: torch.Tensor) -> torch.Tensor:
    mean = torch.tensor(NORMALIZE_MEAN, dtype=t.dtype).view(3, 1, 1)
    std = torch.tensor(NORMALIZE_STD, dtype=t.dtype).view(3, 1, 1)
    return (t - mean) / std


def train_transform(sample: Sample, rng: torch.Generator,
                    resize: int = TRAIN_RESIZE,
                    crop: int = TRAIN_CROP) -> tuple[torch.Tensor, torch.Tensor]:
    """Resize to `resize`, take one shared random `crop` x `crop` window, and
    normalize the image. Returns (image (3, c, c), mask (c, c))."""
    if crop > resize:
        raise ValueError("crop size exceeds resize size")
    img = _resize_image(_to_chw(sample.image), (resize, resize))
    msk = _resize_image(torch.from_numpy(sample.mask).to(torch.float32)[None],
                        (resize, resize))
    msk = msk.clamp(0.0, 1.0)
    span = resize - crop + 1
    r = int(torch.randint(span, (1,), generator=rng))
    c = int(torch.randint(span, (1,), generator=rng))
    img = img[:, r:r + crop, c:c + crop]
    msk = msk[0, r:r + crop, c:c + crop]
    return normalize_image(img), msk


def eval_transform(image: np.ndarray, resize: int = TRAIN_RESIZE):
    """Resize an image to the network input size.

    Returns (normalized (3, resize, resize) tensor, restore) where
    restore(map) bilinearly resizes a predicted (resize, resize) map back to
    the original image size and returns a numpy array in [0, 1].
    """
    original = image.shape[:2]
    img = normalize_image(_resize_image(_to_chw(image), (resize, resize)))

    def restore(prob_map: torch.Tensor) -> np.ndarray:
        t = prob_map.detach().to(torch.float32)
        while t.dim() > 2:
            t = t.squeeze(0)
        out = F.interpolate(t[None, None], size=original, mode="bilinear",
                            align_corners=False)[0, 0]
        return out.clamp(0.0, 1.0).numpy().astype(np.float64)

    return img, restore
