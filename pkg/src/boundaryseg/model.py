"""Full segmentation architectures for training, ablation, and inference.

Output ordering follows the side-output contract: index 0 is the refined
map (when a refinement module is present), indices 1..6 the decoder stages
1..6 (shallow to deep), and the last index the bridge. The plain
encoder-decoder (ED) variant supervises only decoder stage 1; EDS adds the
other six heads; the EDS+RRM variants append the refined map in front.
"""

from __future__ import annotations

import enum

import torch
import torch.nn as nn

from .prednet import PredNetConfig, PredictionModule, UNetBaseline, build_prediction_module
from .refinement import RRMVariant, build_refinement_module


class Architecture(enum.Enum):
    UNET_BASELINE = "unet_baseline"
    ED = "ed"
    EDS = "eds"
    EDS_RRM_LC = "eds_rrm_lc"
    EDS_RRM_MS = "eds_rrm_ms"
    EDS_RRM_OURS = "eds_rrm_ours"


_RRM_FOR_ARCH = {
    Architecture.EDS_RRM_LC: RRMVariant.LC,
    Architecture.EDS_RRM_MS: RRMVariant.MS,
    Architecture.EDS_RRM_OURS: RRMVariant.OURS,
}


class SegmentationModel(nn.Module):
    """Prediction module plus optional residual refinement, emitting the
    supervised probability maps for the configured architecture."""

    def __init__(self, architecture: Architecture = Architecture.EDS_RRM_OURS,
                 config: PredNetConfig = PredNetConfig(),
                 pretrained_encoder=None):
        super().__init__()
        if not isinstance(architecture, Architecture):
            architecture = Architecture(architecture)
        self.architecture = architecture
        self.config = config
        if architecture is Architecture.UNET_BASELINE:
            self.prediction = UNetBaseline()
            self.refinement = None
        else:
            self.prediction = build_prediction_module(config, pretrained_encoder)
            rrm = _RRM_FOR_ARCH.get(architecture)
            self.refinement = build_refinement_module(rrm) if rrm else None

    @property
    def num_outputs(self) -> int:
        if self.architecture in (Architecture.UNET_BASELINE, Architecture.ED):
            return 1
        return 7 if self.refinement is None else 8

    def forward_logits(self, x: torch.Tensor) -> list[torch.Tensor]:
        logits = self.prediction(x)
        if self.architecture is Architecture.UNET_BASELINE:
            return logits
        if self.architecture is Architecture.ED:
            return logits[:1]
        if self.refinement is None:
            return logits
        coarse = logits[0]  # decoder stage 1: the coarse output fed to refinement
        refined = coarse + self.refinement(coarse)
        return [refined] + logits

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Probability maps, each (B, 1, H, W) at input resolution."""
        return [torch.sigmoid(l) for l in self.forward_logits(x)]

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        """Final output map: the refined map when present, else the shallowest
        supervised decoder output."""
        with torch.no_grad():
            return self.forward(x)[0]


def build_model(architecture, pretrained_encoder=None) -> SegmentationModel:
    return SegmentationModel(architecture, pretrained_encoder=pretrained_encoder)
