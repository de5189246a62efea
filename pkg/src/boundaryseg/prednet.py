"""Densely supervised encoder-decoder prediction network.

The encoder is an adapted ResNet-34: a 3x3 stride-1 input convolution with
no pooling after it, the four standard basic-block stages, then two extra
stages of three 512-filter basic blocks each behind a non-overlapping 2x2
max pool. A three-layer dilated (dilation=2) bridge sits between encoder
and decoder. Each of the six decoder stages runs three conv+BN+ReLU layers
on the concatenation of the bilinearly upsampled previous stage and the
matching encoder stage. Seven 3x3 side heads (six decoder stages plus the
bridge) emit 1-channel logits upsampled to the input size; probabilities
are produced by a sigmoid at the module boundary.
"""

from __future__ import annotations

import dataclasses
from typing import Mapping, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclasses.dataclass(frozen=True)
class PredNetConfig:
    input_conv_filters: int = 64
    encoder_stage_blocks: tuple[int, ...] = (3, 4, 6, 3, 3, 3)
    encoder_stage_filters: tuple[int, ...] = (64, 128, 256, 512, 512, 512)
    bridge_filters: int = 512
    bridge_layers: int = 3
    bridge_dilation: int = 2
    decoder_convs_per_stage: int = 3

    def __post_init__(self):
        if len(self.encoder_stage_blocks) != 6 or len(self.encoder_stage_filters) != 6:
            raise ValueError("encoder must have exactly 6 stages")
        if self.bridge_dilation != 2:
            raise ValueError("bridge dilation must be 2")

    @property
    def side_output_count(self) -> int:
        return 7


class BasicResBlock(nn.Module):
    """Two 3x3 conv+BN layers with an identity shortcut; a 1x1 projection
    shortcut is used when the channel count or stride changes."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.downsample = None

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


def conv_bn_relu(in_ch: int, out_ch: int, dilation: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=dilation, dilation=dilation),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


def xavier_init(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class ParameterMismatchError(RuntimeError):
    """Pretrained parameter shapes inconsistent with the configured layout."""


class PredictionModule(nn.Module):
    """Forward maps a normalized (B, 3, H, W) batch, H and W divisible by 32,
    to 7 logit maps at input resolution, ordered decoder stage 1..6 then
    bridge (shallowest to deepest supervision)."""

    def __init__(self, config: PredNetConfig = PredNetConfig()):
        super().__init__()
        self.config = config
        filters = config.encoder_stage_filters
        blocks = config.encoder_stage_blocks

        self.inconv = nn.Conv2d(3, config.input_conv_filters, 3, padding=1, bias=False)
        self.inbn = nn.BatchNorm2d(config.input_conv_filters)
        self.inrelu = nn.ReLU(inplace=True)

        # Stages 1-4: ResNet-34 layout (stride-2 first block in stages 2-4).
        in_ch = config.input_conv_filters
        encoder = []
        for i in range(4):
            stride = 1 if i == 0 else 2
            encoder.append(self._make_stage(in_ch, filters[i], blocks[i], stride))
            in_ch = filters[i]
        # Stages 5-6: 2x2 non-overlapping max pool then three 512-filter blocks.
        for i in (4, 5):
            encoder.append(self._make_stage(in_ch, filters[i], blocks[i], 1))
            in_ch = filters[i]
        self.encoder = nn.ModuleList(encoder)
        self.pool = nn.MaxPool2d(2, stride=2)

        self.bridge = nn.Sequential(*[
            conv_bn_relu(config.bridge_filters if i else filters[5],
                         config.bridge_filters, dilation=config.bridge_dilation)
            for i in range(config.bridge_layers)
        ])

        # Decoder stage i outputs the same width as encoder stage i.
        decoder = []
        prev_ch = config.bridge_filters
        for i in reversed(range(6)):  # deep (stage 6) to shallow (stage 1)
            out_ch = filters[i]
            layers = [conv_bn_relu(prev_ch + filters[i], out_ch)]
            layers += [conv_bn_relu(out_ch, out_ch)
                       for _ in range(config.decoder_convs_per_stage - 1)]
            decoder.append(nn.Sequential(*layers))
            prev_ch = out_ch
        self.decoder = nn.ModuleList(decoder)  # index 0 = stage 6, index 5 = stage 1

        self.side_heads = nn.ModuleList(
            [nn.Conv2d(filters[i], 1, 3, padding=1) for i in range(6)]
            + [nn.Conv2d(config.bridge_filters, 1, 3, padding=1)]
        )
        xavier_init(self)

    @staticmethod
    def _make_stage(in_ch: int, out_ch: int, blocks: int, stride: int) -> nn.Sequential:
        layers = [BasicResBlock(in_ch, out_ch, stride)]
        layers += [BasicResBlock(out_ch, out_ch) for _ in range(blocks - 1)]
        return nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(
                f"spatial dims {h}x{w} not divisible by 32; resize or pad the input")

        feats = []
        out = self.inrelu(self.inbn(self.inconv(x)))
        for i, stage in enumerate(self.encoder):
            if i >= 4:
                out = self.pool(out)
            out = stage(out)
            feats.append(out)

        bridge = self.bridge(feats[5])

        dec_feats = [None] * 6
        prev = bridge
        for idx, stage in enumerate(self.decoder):
            enc = feats[5 - idx]
            if prev.shape[-2:] != enc.shape[-2:]:
                prev = F.interpolate(prev, size=enc.shape[-2:], mode="bilinear",
                                     align_corners=False)
            prev = stage(torch.cat([prev, enc], dim=1))
            dec_feats[5 - idx] = prev

        logits = []
        for i in range(6):
            side = self.side_heads[i](dec_feats[i])
            logits.append(F.interpolate(side, size=(h, w), mode="bilinear",
                                        align_corners=False))
        bridge_side = self.side_heads[6](bridge)
        logits.append(F.interpolate(bridge_side, size=(h, w), mode="bilinear",
                                    align_corners=False))
        return logits


# torchvision-style ResNet-34 parameter names mapped onto our layout.
_BACKBONE_PREFIXES = {
    "conv1": "inconv",
    "bn1": "inbn",
    "layer1": "encoder.0",
    "layer2": "encoder.1",
    "layer3": "encoder.2",
    "layer4": "encoder.3",
}
# The input conv is deliberately 3x3 stride 1 instead of the backbone's
# 7x7 stride 2, so its weight never shape-matches and is left Xavier-initialized.
_ALLOWED_SHAPE_SKIPS = {"conv1.weight"}


def _map_backbone_name(name: str) -> Optional[str]:
    head, dot, rest = name.partition(".")
    if head in _BACKBONE_PREFIXES:
        return _BACKBONE_PREFIXES[head] + dot + rest
    return None


def load_pretrained_encoder(module: PredictionModule,
                            state_dict: Mapping[str, torch.Tensor]) -> dict[str, list[str]]:
    """Copy shape-matching input-layer and stage 1-4 parameters.

    Returns a report {"copied": [...], "skipped": [...]}. Mapped parameters
    with inconsistent shapes (other than the documented input-conv
    adaptation) raise ParameterMismatchError listing the offenders.
    """
    own = dict(module.state_dict())
    copied, skipped, mismatched = [], [], []
    new_state = {}
    for name, tensor in state_dict.items():
        # Projection shortcuts are stored under "downsample.0/.1" in both layouts.
        target = _map_backbone_name(name)
        if target is None or target not in own:
            skipped.append(name)
            continue
        if tuple(own[target].shape) != tuple(tensor.shape):
            if name in _ALLOWED_SHAPE_SKIPS:
                skipped.append(name)
            else:
                mismatched.append(f"{name} -> {target}: "
                                  f"{tuple(tensor.shape)} vs {tuple(own[target].shape)}")
            continue
        new_state[target] = tensor
        copied.append(name)
    if mismatched:
        raise ParameterMismatchError(
            "pretrained parameters inconsistent with config:\n  " + "\n  ".join(mismatched))
    module.load_state_dict({**own, **new_state})
    return {"copied": copied, "skipped": skipped}


def build_prediction_module(config: PredNetConfig = PredNetConfig(),
                            pretrained_encoder: Optional[Mapping[str, torch.Tensor]] = None,
                            ) -> PredictionModule:
    """Construct the prediction network; all parameters start Xavier-initialized
    and any supplied shape-matching backbone parameters overwrite stages 1-4
    and the input layer."""
    module = PredictionModule(config)
    if pretrained_encoder is not None:
        load_pretrained_encoder(module, pretrained_encoder)
    return module


def forward_prediction(module: PredictionModule, batch: torch.Tensor) -> list[torch.Tensor]:
    """Probability maps (sigmoid of the side logits), decoder 1..6 then bridge."""
    return [torch.sigmoid(l) for l in module(batch)]


class UNetBaseline(nn.Module):
    """Classic symmetric 4-down/4-up encoder-decoder with one output head,
    used as the architecture-ablation baseline row."""

    def __init__(self, base: int = 64):
        super().__init__()
        chs = [base, base * 2, base * 4, base * 8]
        self.enc = nn.ModuleList()
        in_ch = 3
        for ch in chs:
            self.enc.append(nn.Sequential(conv_bn_relu(in_ch, ch), conv_bn_relu(ch, ch)))
            in_ch = ch
        self.pool = nn.MaxPool2d(2)
        self.bottom = nn.Sequential(conv_bn_relu(chs[-1], chs[-1] * 2),
                                    conv_bn_relu(chs[-1] * 2, chs[-1] * 2))
        self.dec = nn.ModuleList()
        prev = chs[-1] * 2
        for ch in reversed(chs):
            self.dec.append(nn.Sequential(conv_bn_relu(prev + ch, ch), conv_bn_relu(ch, ch)))
            prev = ch
        self.head = nn.Conv2d(chs[0], 1, 3, padding=1)
        xavier_init(self)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        out = x
        for i, stage in enumerate(self.enc):
            if i:
                out = self.pool(out)
            out = stage(out)
            feats.append(out)
        out = self.bottom(self.pool(out))
        for stage, skip in zip(self.dec, reversed(feats)):
            out = F.interpolate(out, size=skip.shape[-2:], mode="bilinear",
                                align_corners=False)
            out = stage(torch.cat([out, skip], dim=1))
        return [self.head(out)]
