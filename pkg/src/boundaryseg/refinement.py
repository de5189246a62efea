"""Residual refinement modules.

Each variant maps a 1-channel coarse logit map to a 1-channel residual at
the same resolution; the refined probability is sigmoid(coarse + residual).
Adding in the pre-activation (logit) domain keeps the refined map inside
(0, 1) without clamping while preserving the additive coarse + residual form.
"""

from __future__ import annotations

import enum

import torch
import torch.nn as nn
import torch.nn.functional as F

from .prednet import conv_bn_relu, xavier_init


class RRMVariant(enum.Enum):
    OURS = "ours"
    LC = "lc"
    MS = "ms"


class RefineEncoderDecoder(nn.Module):
    """Encoder-decoder refiner: input layer, four one-conv stages down
    (2x2 non-overlapping max pool), a bridge, four one-conv stages up
    (bilinear), and a 3x3 output layer. Every hidden conv has 64 filters."""

    def __init__(self, width: int = 64):
        super().__init__()
        self.inconv = conv_bn_relu(1, width)
        self.enc = nn.ModuleList([conv_bn_relu(width, width) for _ in range(4)])
        self.pool = nn.MaxPool2d(2, stride=2)
        self.bridge = conv_bn_relu(width, width)
        self.dec = nn.ModuleList([conv_bn_relu(width * 2, width) for _ in range(4)])
        self.outconv = nn.Conv2d(width, 1, 3, padding=1)
        xavier_init(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.inconv(x)
        feats = []
        for stage in self.enc:
            out = stage(out)
            feats.append(out)
            out = self.pool(out)
        out = self.bridge(out)
        for stage, skip in zip(self.dec, reversed(feats)):
            out = F.interpolate(out, size=skip.shape[-2:], mode="bilinear",
                                align_corners=False)
            out = stage(torch.cat([out, skip], dim=1))
        return self.outconv(out)


class RefineLocal(nn.Module):
    """Shallow full-resolution stack of plain 3x3 convs (small receptive
    field); ablation stand-in for boundary-local refiners."""

    def __init__(self, width: int = 64, layers: int = 4):
        super().__init__()
        convs = [conv_bn_relu(1, width)]
        convs += [conv_bn_relu(width, width) for _ in range(layers - 2)]
        self.body = nn.Sequential(*convs)
        self.outconv = nn.Conv2d(width, 1, 3, padding=1)
        xavier_init(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.outconv(self.body(x))


class RefineMultiScale(nn.Module):
    """Four parallel 3x3 convs with dilations 1, 2, 4, 8 (64 filters each),
    concatenated and fused by a 1x1 conv."""

    DILATIONS = (1, 2, 4, 8)

    def __init__(self, width: int = 64):
        super().__init__()
        self.branches = nn.ModuleList(
            [conv_bn_relu(1, width, dilation=d) for d in self.DILATIONS])
        self.fuse = nn.Conv2d(width * len(self.DILATIONS), 1, 1)
        xavier_init(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fuse(torch.cat([b(x) for b in self.branches], dim=1))


_VARIANTS = {
    RRMVariant.OURS: RefineEncoderDecoder,
    RRMVariant.LC: RefineLocal,
    RRMVariant.MS: RefineMultiScale,
}


def build_refinement_module(variant: RRMVariant = RRMVariant.OURS) -> nn.Module:
    if not isinstance(variant, RRMVariant):
        variant = RRMVariant(variant)
    return _VARIANTS[variant]()


def forward_refine(module: nn.Module, coarse_logits: torch.Tensor) -> torch.Tensor:
    """Refined probability map: sigmoid(coarse_logits + residual_logits).

    With all residual-branch parameters zero this reduces bit-exactly to
    sigmoid(coarse_logits).
    """
    if coarse_logits.dim() != 4 or coarse_logits.shape[1] != 1:
        raise ValueError(
            f"expected (B, 1, H, W) coarse logits, got {tuple(coarse_logits.shape)}")
    residual = module(coarse_logits)
    return torch.sigmoid(coarse_logits + residual)


def zero_residual(module: nn.Module) -> None:
    """Zero every parameter and running stat so the residual branch is the
    constant zero function (used by the identity-degeneracy check)."""
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
        for m in module.modules():
            if isinstance(m, nn.BatchNorm2d):
                m.running_mean.zero_()
                m.running_var.fill_(1.0)


def receptive_field(variant: RRMVariant) -> int:
    """Analytic receptive field (one side, in input pixels) accumulated over
    the variant's layers; used to contrast local vs encoder-decoder refiners."""
    if not isinstance(variant, RRMVariant):
        variant = RRMVariant(variant)
    if variant is RRMVariant.LC:
        rf, jump = 1, 1
        for _ in range(4):  # body convs + output conv share kernel 3, stride 1
            rf += 2 * jump
        return rf
    if variant is RRMVariant.MS:
        # widest branch: 3x3 dilation 8, then the 1x1 fuse
        return 1 + 2 * 8
    rf, jump = 1, 1
    rf += 2 * jump  # input conv
    for _ in range(4):  # encoder conv then 2x2 pool
        rf += 2 * jump
        rf += (2 - 1) * jump
        jump *= 2
    rf += 2 * jump  # bridge
    for _ in range(4):  # decoder convs after upsampling
        jump = max(jump // 2, 1)
        rf += 2 * jump
    rf += 2 * jump  # output conv
    return rf
