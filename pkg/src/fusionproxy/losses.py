"""Distillation losses: uncertainty-weighted pixel L1, routed feature
matching over the backbone panel, and an SSIM term against the ensemble mean.
All terms are differentiable in the prediction; statistics enter as constants.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .panel import Backbone, FeatureStats, PanelNormStats, normalized_features_t
from .teachers import EnsembleStats

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class LossWeights:
    lambda_pix: float = 1.0
    lambda_mfm: float = 0.5
    lambda_ssim: float = 0.2

    def __post_init__(self):
        for name in ("lambda_pix", "lambda_mfm", "lambda_ssim"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def all_zero(self) -> bool:
        return self.lambda_pix == 0 and self.lambda_mfm == 0 and self.lambda_ssim == 0


@dataclass(frozen=True)
class LossBreakdown:
    pixel: float
    mfm: float
    ssim: float
    total: float


def _as_tensor(x, like: torch.Tensor) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype=like.dtype, device=like.device)
    return torch.as_tensor(np.ascontiguousarray(x), dtype=like.dtype, device=like.device)


def pixel_loss(pred: torch.Tensor, mean: torch.Tensor | np.ndarray, weights: torch.Tensor | np.ndarray) -> torch.Tensor:
    """Weighted mean absolute error against the ensemble mean.

    ``weights`` is a per-pixel field summing to one; the channel dimension is
    summed, so uniform weights and a constant offset d give 3 * d.
    """
    mean_t = _as_tensor(mean, pred)
    w_t = _as_tensor(weights, pred)
    if pred.shape != mean_t.shape:
        raise ValueError(f"pred {tuple(pred.shape)} and mean {tuple(mean_t.shape)} disagree")
    if w_t.shape != pred.shape[:2]:
        raise ValueError(f"weights {tuple(w_t.shape)} do not match image {tuple(pred.shape[:2])}")
    return (w_t * (pred - mean_t).abs().sum(dim=-1)).sum()


def mfm_loss(
    pred_feats: Sequence[torch.Tensor],
    targets: Sequence[torch.Tensor | np.ndarray],
    routing: torch.Tensor | np.ndarray,
) -> torch.Tensor:
    """Routed multi-backbone feature matching.

    Per backbone, the squared error to the target (summed over channels) is
    weighted by that backbone's routing field and averaged over grid cells;
    backbone contributions are summed.
    """
    if len(pred_feats) == 0:
        raise ValueError("mfm_loss needs at least one backbone")
    if len(pred_feats) != len(targets):
        raise ValueError(f"{len(pred_feats)} feature maps vs {len(targets)} targets")
    r_t = _as_tensor(routing, pred_feats[0])
    if r_t.shape[0] != len(pred_feats):
        raise ValueError(f"routing has {r_t.shape[0]} slots for {len(pred_feats)} backbones")
    total = None
    for k, (f, t) in enumerate(zip(pred_feats, targets)):
        t_t = _as_tensor(t, f)
        if f.shape != t_t.shape:
            raise ValueError(
                f"backbone {k}: features {tuple(f.shape)} vs target {tuple(t_t.shape)}"
            )
        if f.shape[:2] != r_t.shape[1:]:
            raise ValueError(
                f"backbone {k}: grid {tuple(f.shape[:2])} vs routing {tuple(r_t.shape[1:])}"
            )
        cell = ((f - t_t) ** 2).sum(dim=-1)
        term = (r_t[k] * cell).mean()
        total = term if total is None else total + term
    return total


def _gaussian_window(dtype: torch.dtype, device) -> torch.Tensor:
    half = (SSIM_WINDOW - 1) / 2
    coords = torch.arange(SSIM_WINDOW, dtype=dtype, device=device) - half
    g = torch.exp(-(coords**2) / (2 * SSIM_SIGMA**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(x: torch.Tensor, y: torch.Tensor | np.ndarray) -> torch.Tensor:
    """Mean SSIM between two (H, W, C) images in [0, 1].

    Gaussian 11x11 window, sigma 1.5, valid windows only, averaged over
    channels. Images must be at least 11 pixels on each side.
    """
    y_t = _as_tensor(y, x)
    if x.shape != y_t.shape or x.ndim != 3:
        raise ValueError(f"ssim expects matching (H, W, C) images, got {tuple(x.shape)} and {tuple(y_t.shape)}")
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image {tuple(x.shape[:2])} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window")
    c = x.shape[2]
    win = _gaussian_window(x.dtype, x.device).expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)
    a = x.permute(2, 0, 1).unsqueeze(0)
    b = y_t.permute(2, 0, 1).unsqueeze(0)

    def blur(t: torch.Tensor) -> torch.Tensor:
        return F.conv2d(t, win, groups=c)

    mu_a = blur(a)
    mu_b = blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return (num / den).mean()


def ssim_loss(pred: torch.Tensor, mean: torch.Tensor | np.ndarray) -> torch.Tensor:
    return 1.0 - ssim(pred, mean)


def total_loss(
    pred: torch.Tensor,
    pixel_stats: EnsembleStats,
    feat_stats: FeatureStats,
    panel: Sequence[Backbone],
    norms: PanelNormStats,
    weights: LossWeights = LossWeights(),
) -> tuple[torch.Tensor, LossBreakdown]:
    """Weighted sum of the three supervision terms for one prediction.

    Recomputes the prediction's panel features through the same normalized
    path the targets used, so the feature term is consistent by construction.
    """
    if pixel_stats.pair_id != feat_stats.pair_id:
        raise ValueError(
            f"pair-id mismatch: pixel stats {pixel_stats.pair_id!r} vs feature stats {feat_stats.pair_id!r}"
        )
    if len(feat_stats.targets) != len(panel):
        raise ValueError(f"feature stats carry {len(feat_stats.targets)} backbones, panel has {len(panel)}")
    l_pix = pixel_loss(pred, pixel_stats.mean, pixel_stats.pixel_weights)
    grid = (int(feat_stats.routing.shape[1]), int(feat_stats.routing.shape[2]))
    pred_feats = [normalized_features_t(b, norms, pred, grid=grid) for b in panel]
    l_mfm = mfm_loss(pred_feats, list(feat_stats.targets), feat_stats.routing)
    l_ssim = ssim_loss(pred, pixel_stats.mean)
    total = weights.lambda_pix * l_pix + weights.lambda_mfm * l_mfm + weights.lambda_ssim * l_ssim
    breakdown = LossBreakdown(
        pixel=float(l_pix.detach()),
        mfm=float(l_mfm.detach()),
        ssim=float(l_ssim.detach()),
        total=float(total.detach()),
    )
    return total, breakdown
