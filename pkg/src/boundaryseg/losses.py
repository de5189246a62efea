"""Hybrid three-level training loss: pixel BCE, patch SSIM, map IoU.

All terms accept probability maps S and ground-truth maps G of identical
shape, either (H, W) or (B, H, W) torch tensors; per-image values are
averaged over the batch. Each term is >= 0 and exactly 0 iff S == G (up
to the log-guard clip for BCE).
"""

from __future__ import annotations

import dataclasses
import math

import torch
import torch.nn.functional as F

from .core import PROB_EPS, LossBreakdown, LossTerms


@dataclasses.dataclass(frozen=True)
class SSIMParams:
    """Gaussian-window SSIM configuration. C1 = 0.01^2 and C2 = 0.03^2 guard
    the ratio against division by zero."""

    window: int = 11
    sigma: float = 1.5
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2


DEFAULT_SSIM = SSIMParams()

LOSS_VARIANTS = {
    "b": ("bce",),
    "s": ("ssim",),
    "i": ("iou",),
    "bs": ("bce", "ssim"),
    "bi": ("bce", "iou"),
    "si": ("ssim", "iou"),
    "bsi": ("bce", "ssim", "iou"),
}


@dataclasses.dataclass(frozen=True)
class LossConfig:
    """Enabled loss terms plus per-output weights for the deep supervision sum."""

    enabled_terms: tuple[str, ...] = ("bce", "ssim", "iou")
    alpha: tuple[float, ...] = (1.0,) * 8
    ssim: SSIMParams = DEFAULT_SSIM

    def __post_init__(self):
        bad = set(self.enabled_terms) - {"bce", "ssim", "iou"}
        if bad:
            raise ValueError(f"unknown loss terms: {sorted(bad)}")
        if not self.enabled_terms:
            raise ValueError("at least one loss term must be enabled")
        if any(a <= 0 for a in self.alpha):
            raise ValueError("output weights must be positive")

    @classmethod
    def from_variant(cls, variant: str, n_outputs: int = 8,
                     ssim: SSIMParams = DEFAULT_SSIM) -> "LossConfig":
        if variant not in LOSS_VARIANTS:
            raise ValueError(
                f"unknown loss variant {variant!r}; valid: {sorted(LOSS_VARIANTS)}")
        return cls(enabled_terms=LOSS_VARIANTS[variant],
                   alpha=(1.0,) * n_outputs, ssim=ssim)


def _check_shapes(s: torch.Tensor, g: torch.Tensor) -> None:
    if s.shape != g.shape:
        raise ValueError(f"shape mismatch: S {tuple(s.shape)} vs G {tuple(g.shape)}")
    if s.dim() not in (2, 3):
        raise ValueError(f"expected (H, W) or (B, H, W), got {tuple(s.shape)}")


def _as_batch(t: torch.Tensor) -> torch.Tensor:
    return t.unsqueeze(0) if t.dim() == 2 else t


def bce_loss(s: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Binary cross entropy, averaged over pixels per image then over the batch.

    S is clipped to [eps, 1 - eps] before the logarithms.
    """
    _check_shapes(s, g)
    s = _as_batch(s).clamp(PROB_EPS, 1.0 - PROB_EPS)
    g = _as_batch(g)
    per_image = -(g * torch.log(s) + (1.0 - g) * torch.log(1.0 - s)).mean(dim=(1, 2))
    return per_image.mean()


def gaussian_window(size: int, sigma: float, dtype=torch.float64) -> torch.Tensor:
    """Normalized 2D Gaussian window of the given odd size."""
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g1 = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    win = torch.outer(g1, g1)
    return win / win.sum()


def ssim_loss(s: torch.Tensor, g: torch.Tensor,
              params: SSIMParams = DEFAULT_SSIM) -> torch.Tensor:
    """1 - mean SSIM over all dense (stride-1) patch positions.

    Patch statistics (means, variances, covariance) are Gaussian-weighted
    moments computed with a valid (no padding) window, so only fully inside
    positions contribute.
    """
    _check_shapes(s, g)
    s, g = _as_batch(s), _as_batch(g)
    n = params.window
    if s.shape[-1] < n or s.shape[-2] < n:
        raise ValueError(
            f"spatial size {tuple(s.shape[-2:])} smaller than SSIM window {n}")
    win = gaussian_window(n, params.sigma, dtype=s.dtype).to(s.device)
    kernel = win.view(1, 1, n, n)

    x = s.unsqueeze(1)
    y = g.unsqueeze(1)
    mu_x = F.conv2d(x, kernel)
    mu_y = F.conv2d(y, kernel)
    # Weighted second moments; sigma here is the weighted variance.
    var_x = F.conv2d(x * x, kernel) - mu_x ** 2
    var_y = F.conv2d(y * y, kernel) - mu_y ** 2
    cov = F.conv2d(x * y, kernel) - mu_x * mu_y

    ssim_map = ((2 * mu_x * mu_y + params.c1) * (2 * cov + params.c2)) / (
        (mu_x ** 2 + mu_y ** 2 + params.c1) * (var_x + var_y + params.c2))
    per_image = ssim_map.mean(dim=(1, 2, 3))
    return (1.0 - per_image).mean()


def iou_loss(s: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Soft intersection-over-union loss: 1 - sum(SG) / sum(S + G - SG).

    An all-zero S and G pair has an empty union; that is perfect agreement,
    so the loss is defined as 0 there.
    """
    _check_shapes(s, g)
    s, g = _as_batch(s), _as_batch(g)
    inter = (s * g).sum(dim=(1, 2))
    union = (s + g - s * g).sum(dim=(1, 2))
    loss = torch.where(union > 0, 1.0 - inter / union.clamp(min=1e-12),
                       torch.zeros_like(union))
    return loss.mean()


_TERM_FNS = {"bce": bce_loss, "iou": iou_loss}


def hybrid_loss(s: torch.Tensor, g: torch.Tensor,
                config: LossConfig) -> dict[str, torch.Tensor]:
    """Sum of the enabled terms; disabled terms are reported as zero."""
    zero = torch.zeros((), dtype=s.dtype, device=s.device)
    terms = {"bce": zero, "ssim": zero, "iou": zero}
    for name in config.enabled_terms:
        if name == "ssim":
            terms["ssim"] = ssim_loss(s, g, config.ssim)
        else:
            terms[name] = _TERM_FNS[name](s, g)
    terms["hybrid"] = sum(terms[name] for name in config.enabled_terms)
    return terms


def total_loss(outputs, g: torch.Tensor, config: LossConfig) -> tuple[torch.Tensor, LossBreakdown]:
    """Deeply supervised total: sum over outputs of alpha_k * hybrid_k.

    Returns the differentiable total and a detached per-output breakdown.
    """
    if len(outputs) != len(config.alpha):
        raise ValueError(
            f"{len(outputs)} outputs but {len(config.alpha)} output weights")
    total = torch.zeros((), dtype=g.dtype, device=g.device)
    records = []
    for alpha_k, s_k in zip(config.alpha, outputs):
        terms = hybrid_loss(s_k, g, config)
        total = total + alpha_k * terms["hybrid"]
        records.append(LossTerms(
            bce=float(terms["bce"].detach()), ssim=float(terms["ssim"].detach()),
            iou=float(terms["iou"].detach()), hybrid=float(terms["hybrid"].detach())))
    breakdown = LossBreakdown(per_output=tuple(records), total=float(total.detach()))
    if not math.isfinite(breakdown.total):
        raise FloatingPointError("non-finite training loss")
    return total, breakdown
