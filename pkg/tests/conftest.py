import numpy as np
import pytest
import torch

from boundaryseg.core import Sample
from boundaryseg.prednet import PredNetConfig

# Narrow, shallow variant of the prediction network used where tests only
# exercise plumbing (checkpoints, CLI, service); architecture-contract tests
# use the default config.
TINY_CONFIG = PredNetConfig(
    input_conv_filters=8,
    encoder_stage_blocks=(1, 1, 1, 1, 1, 1),
    encoder_stage_filters=(8, 8, 8, 8, 8, 8),
    bridge_filters=8,
)


def blob_pair(height: int = 96, width: int = 96, seed: int = 0):
    """Synthetic image/mask pair: a bright rectangle plus an ellipse on a
    textured dark background."""
    rng = np.random.default_rng(seed)
    mask = np.zeros((height, width))
    r0, r1 = height // 4, 3 * height // 4
    c0, c1 = width // 4, 5 * width // 8
    mask[r0:r1, c0:c1] = 1.0
    yy, xx = np.mgrid[0:height, 0:width]
    ellipse = (((yy - height * 0.4) / (height * 0.18)) ** 2
               + ((xx - width * 0.7) / (width * 0.15)) ** 2) <= 1.0
    mask[ellipse] = 1.0

    image = np.empty((height, width, 3))
    base = rng.uniform(0.05, 0.25, size=(height, width))
    image[..., 0] = np.where(mask > 0.5, 0.85, base)
    image[..., 1] = np.where(mask > 0.5, 0.55, base * 1.2)
    image[..., 2] = np.where(mask > 0.5, 0.25, base * 0.8)
    image += rng.normal(0.0, 0.02, size=image.shape)
    return np.clip(image, 0.0, 1.0), mask


def blob_sample(height: int = 96, width: int = 96, seed: int = 0,
                identifier: str = "blob") -> Sample:
    image, mask = blob_pair(height, width, seed)
    return Sample(image=image, mask=mask, identifier=identifier,
                  original_size=(height, width))


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
