"""The five evaluation measures: weighted F, relaxed boundary F, MAE,
structure measure, and mean enhanced-alignment measure.

Conventions fixed here (the constants follow the measures' canonical
definitions):
  * both F variants use beta^2 = 1;
  * weighted F uses a 7x7 Gaussian (sigma = 5, zero padding) and background
    decay 2 - exp(ln(0.5)/5 * distance); the error copied to a background
    pixel comes from the nearest foreground pixel, ties broken by the
    smallest error so the result is implementation-order independent;
  * boundary F uses 4-connected boundaries (pixels outside the image count
    as background), binarization threshold 0.5, tolerance radius 3;
  * structure measure uses alpha = 0.5, lambda = 1, quadrants split at the
    rounded foreground centroid and weighted by foreground mass;
  * enhanced alignment averages 256 thresholds k/255; the k = 0 threshold
    binarizes with a strict comparison so a perfect binary prediction
    scores exactly 1 at every threshold.

Degenerate ground truths: an all-background G makes the weighted F
undefined (NaN, skipped by the aggregator), the structure measure
1 - mean(S), and the alignment term mean(1 - S_t); empty-vs-empty
boundaries count as perfect agreement.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.ndimage import convolve

from .core import MetricReport

FW_GAUSSIAN_SIZE = 7
FW_GAUSSIAN_SIGMA = 5.0
FW_DECAY = math.log(0.5) / 5.0


@dataclasses.dataclass(frozen=True)
class BoundaryParams:
    rho: int = 3
    threshold: float = 0.5

    def __post_init__(self):
        if self.rho < 0 or int(self.rho) != self.rho:
            raise ValueError("rho must be a non-negative integer")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")


def _check_pair(s: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(s, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if s.shape != g.shape:
        raise ValueError(f"shape mismatch: S {s.shape} vs G {g.shape}")
    if s.ndim != 2:
        raise ValueError(f"expected 2D maps, got shape {s.shape}")
    return s, g


def _binary_gt(g: np.ndarray) -> np.ndarray:
    vals = np.unique(g)
    if not np.all(np.isin(vals, (0.0, 1.0))):
        raise ValueError("ground truth must be strictly binary")
    return g.astype(bool)


def mae(s: np.ndarray, g: np.ndarray) -> float:
    """Mean absolute per-pixel difference."""
    s, g = _check_pair(s, g)
    return float(np.abs(s - g).mean())


def _boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbor background pixel;
    positions outside the image count as background."""
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~interior


def _min_sq_dist_keys(query: np.ndarray, points: np.ndarray,
                      costs: Optional[np.ndarray] = None,
                      chunk: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """For each query pixel, the minimum over `points` of squared Euclidean
    distance, with `costs` (each < 1, halved) as a deterministic tie-break.
    Returns (squared distances, index of the selected point)."""
    keys = np.zeros(len(query))
    idx = np.zeros(len(query), dtype=np.intp)
    tie = (costs / 2.0) if costs is not None else 0.0
    for start in range(0, len(query), chunk):
        q = query[start:start + chunk]
        d2 = ((q[:, None, :] - points[None, :, :]) ** 2).sum(axis=2).astype(np.float64)
        best = np.argmin(d2 + tie, axis=1)
        rows = np.arange(len(q))
        keys[start:start + chunk] = d2[rows, best]
        idx[start:start + chunk] = best
    return keys, idx


def _fw_gaussian_kernel() -> np.ndarray:
    half = FW_GAUSSIAN_SIZE // 2
    r = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * FW_GAUSSIAN_SIGMA ** 2))
    return k / k.sum()


def weighted_fbeta(s: np.ndarray, g: np.ndarray) -> float:
    """Weighted F-measure on the dependency/importance-corrected error map.

    Undefined (NaN) when G has no foreground.
    """
    s, g = _check_pair(s, g)
    fg = _binary_gt(g)
    if not fg.any():
        return float("nan")

    err = np.abs(s - fg.astype(np.float64))
    et = err.copy()
    dist = np.zeros_like(err)
    bg = ~fg
    if bg.any():
        # Only boundary foreground pixels can be nearest to a background pixel.
        cand = np.argwhere(_boundary(fg))
        cand_err = err[cand[:, 0], cand[:, 1]]
        queries = np.argwhere(bg)
        d2, pick = _min_sq_dist_keys(queries, cand, costs=cand_err)
        et[bg] = cand_err[pick]
        dist[bg] = np.sqrt(d2)

    ea = convolve(et, _fw_gaussian_kernel(), mode="constant", cval=0.0)
    min_e_ea = np.where(fg, np.minimum(err, ea), ea)
    weight = np.where(fg, 1.0, 2.0 - np.exp(FW_DECAY * dist))
    ew = min_e_ea * weight

    tp = fg.sum() - ew[fg].sum()
    fp = ew[bg].sum()
    recall = 1.0 - ew[fg].mean()
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    if precision + recall == 0:
        return 0.0
    return float(2.0 * precision * recall / (precision + recall))


def relaxed_boundary_fbeta(s: np.ndarray, g: np.ndarray,
                           params: BoundaryParams = BoundaryParams()) -> float:
    """Boundary F-measure where a boundary pixel matches within radius rho."""
    s, g = _check_pair(s, g)
    fg = _binary_gt(g)
    pred = s >= params.threshold

    pb = np.argwhere(_boundary(pred))
    gb = np.argwhere(_boundary(fg))
    if len(pb) == 0 and len(gb) == 0:
        return 1.0
    if len(pb) == 0 or len(gb) == 0:
        return 0.0

    rho2 = params.rho ** 2
    d_pred, _ = _min_sq_dist_keys(pb, gb)
    d_gt, _ = _min_sq_dist_keys(gb, pb)
    precision = float((d_pred <= rho2).mean())
    recall = float((d_gt <= rho2).mean())
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _object_score(x: np.ndarray, lam: float = 1.0) -> float:
    xm = float(x.mean())
    sd = float(x.std(ddof=1)) if x.size > 1 else 0.0
    return 2.0 * xm / (xm * xm + 1.0 + 2.0 * lam * sd)


def _region_ssim(x: np.ndarray, y: np.ndarray) -> float:
    n = x.size
    xm, ym = float(x.mean()), float(y.mean())
    if n > 1:
        vx = float(((x - xm) ** 2).sum() / (n - 1))
        vy = float(((y - ym) ** 2).sum() / (n - 1))
        cxy = float(((x - xm) * (y - ym)).sum() / (n - 1))
    else:
        vx = vy = cxy = 0.0
    num = 4.0 * xm * ym * cxy
    den = (xm * xm + ym * ym) * (vx + vy)
    if den == 0.0:
        return 1.0 if num == 0.0 else 0.0
    return num / den


def s_measure(s: np.ndarray, g: np.ndarray, alpha: float = 0.5,
              lam: float = 1.0) -> float:
    """Structure measure: alpha-blend of object- and region-aware similarity."""
    s, g = _check_pair(s, g)
    fg = _binary_gt(g)
    mu = float(fg.mean())
    if mu == 0.0:
        return float(np.clip(1.0 - s.mean(), 0.0, 1.0))
    if mu == 1.0:
        return float(np.clip(s.mean(), 0.0, 1.0))

    s_obj = mu * _object_score(s[fg], lam) + (1.0 - mu) * _object_score(1.0 - s[~fg], lam)

    rows, cols = np.nonzero(fg)
    r0 = int(round(rows.mean()))
    c0 = int(round(cols.mean()))
    total = fg.sum()
    s_reg = 0.0
    for rs in (slice(0, r0), slice(r0, None)):
        for cs in (slice(0, c0), slice(c0, None)):
            gq = fg[rs, cs]
            if gq.size == 0:
                continue
            w = gq.sum() / total
            if w == 0.0:
                continue
            s_reg += w * _region_ssim(s[rs, cs], gq.astype(np.float64))

    return float(np.clip(alpha * s_obj + (1.0 - alpha) * s_reg, 0.0, 1.0))


def _threshold_stack(s: np.ndarray) -> np.ndarray:
    """Binarized prediction at the 256 thresholds k/255; k = 0 uses a strict
    comparison so thresholding a map at 0 keeps only its support."""
    ts = np.arange(256, dtype=np.float64) / 255.0
    stack = s[None, :, :] >= ts[:, None, None]
    stack[0] = s > 0.0
    return stack.astype(np.float64)


def e_measure_mean(s: np.ndarray, g: np.ndarray) -> float:
    """Mean enhanced-alignment measure over 256 binarization thresholds."""
    s, g = _check_pair(s, g)
    fg = _binary_gt(g).astype(np.float64)
    stack = _threshold_stack(s)
    if fg.max() == 0.0:
        return float((1.0 - stack).mean())
    if fg.min() == 1.0:
        return float(stack.mean())
    gc = fg - fg.mean()
    sc = stack - stack.mean(axis=(1, 2), keepdims=True)
    # With a non-degenerate G every centered GT value is nonzero, so the
    # denominator never vanishes and no guard term is needed.
    align = 2.0 * gc[None] * sc / (gc[None] ** 2 + sc ** 2)
    enhanced = (align + 1.0) ** 2 / 4.0
    return float(enhanced.mean())


def evaluate_pair(s: np.ndarray, g: np.ndarray,
                  boundary_params: BoundaryParams = BoundaryParams()) -> MetricReport:
    """All five measures for one prediction/GT pair. A non-binary G is
    thresholded at 0.5 for the binary-GT measures; MAE uses it as given."""
    s, g = _check_pair(s, g)
    gb = (g >= 0.5).astype(np.float64)
    return MetricReport(
        fw_beta=weighted_fbeta(s, gb),
        fb_beta=relaxed_boundary_fbeta(s, gb, boundary_params),
        mae=mae(s, g),
        s_alpha=s_measure(s, gb),
        e_phi=e_measure_mean(s, gb),
    )


def _mean_report(reports: Sequence[MetricReport]) -> MetricReport:
    cols = {name: np.array([getattr(r, name) for r in reports])
            for name in ("fw_beta", "fb_beta", "mae", "s_alpha", "e_phi")}
    # weighted F is NaN for foreground-free GTs; those pairs are skipped.
    fw = cols["fw_beta"]
    fw_mean = float(np.nanmean(fw)) if not np.all(np.isnan(fw)) else float("nan")
    return MetricReport(
        fw_beta=fw_mean,
        fb_beta=float(cols["fb_beta"].mean()),
        mae=float(cols["mae"].mean()),
        s_alpha=float(cols["s_alpha"].mean()),
        e_phi=float(cols["e_phi"].mean()),
    )


@dataclasses.dataclass(frozen=True)
class DatasetReport:
    overall: MetricReport
    n: int
    groups: dict[str, MetricReport] = dataclasses.field(default_factory=dict)


def evaluate_dataset(pairs: Sequence[tuple[np.ndarray, np.ndarray]],
                     grouping: Optional[Mapping[str, Sequence[int]]] = None,
                     boundary_params: BoundaryParams = BoundaryParams()) -> DatasetReport:
    """Arithmetic per-pair averaging, optionally with per-attribute groups.

    `grouping` maps an attribute label to pair indices; the "Avg" entry is
    the mean of the group means.
    """
    if not pairs:
        raise ValueError("cannot evaluate an empty pair list")
    reports = [evaluate_pair(s, g, boundary_params) for s, g in pairs]
    groups: dict[str, MetricReport] = {}
    if grouping:
        for label, indices in grouping.items():
            if not indices:
                raise ValueError(f"attribute group {label!r} is empty")
            groups[label] = _mean_report([reports[i] for i in indices])
        groups["Avg"] = _mean_report(list(groups.values()))
    return DatasetReport(overall=_mean_report(reports), n=len(reports), groups=groups)
