"""Frozen backbone panel: stand-in encoders, common-grid features,
per-channel normalization, feature-space ensemble statistics and routing.

The desk-scale panel uses four small frozen random-weight conv encoders with
distinct seeds and strides. Slot names record the real-checkpoint adapter
points they stand in for (mid-block features: VGG-16 relu3_3, DINOv2 block
6/12, CLIP block 12/24, SAM image-encoder block 6/12); a real adapter only
needs to expose the same ``name``/``channels``/``extract`` surface.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .teachers import TeacherSampleSet

VALID_STRIDES = (4, 8, 14, 16)
ROUTING_EPS = 1e-3
DEFAULT_GRID = 64
DEFAULT_TAU = 1.0


@runtime_checkable
class Backbone(Protocol):
    """Deterministic frozen feature extractor over H x W x 3 images."""

    name: str
    channels: int

    def extract(self, image: torch.Tensor) -> torch.Tensor: ...


class StandinBackbone(nn.Module):
    """Small frozen conv encoder: patchify at ``stride`` then two 3x3 mixing
    layers, all tanh-bounded. Weights come from a fixed seed so extraction is
    bit-reproducible and distinct seeds give distinct feature geometries."""

    def __init__(self, seed: int, channels: int, stride: int, name: str | None = None):
        super().__init__()
        if channels < 1:
            raise ValueError(f"channels must be >= 1, got {channels}")
        if stride not in VALID_STRIDES:
            raise ValueError(f"stride must be one of {VALID_STRIDES}, got {stride}")
        self.name = name if name is not None else f"standin_s{seed}"
        self.seed = seed
        self.channels = channels
        self.stride = stride
        self.patch = nn.Conv2d(3, channels, kernel_size=stride, stride=stride)
        self.mix1 = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.mix2 = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        gen = torch.Generator().manual_seed(seed)
        for conv in (self.patch, self.mix1, self.mix2):
            fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
            with torch.no_grad():
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen) / fan_in**0.5
                )
                conv.bias.copy_(0.1 * torch.randn(conv.bias.shape, generator=gen))
        self.requires_grad_(False)
        self.eval()

    def extract(self, image: torch.Tensor) -> torch.Tensor:
        """Map an (H, W, 3) image to an (h, w, C) feature grid, h = H // stride."""
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) image, got shape {tuple(image.shape)}")
        if image.shape[0] < self.stride or image.shape[1] < self.stride:
            raise ValueError(
                f"image {tuple(image.shape[:2])} smaller than backbone stride {self.stride}"
            )
        x = image.to(self.patch.weight.dtype).permute(2, 0, 1).unsqueeze(0)
        x = torch.tanh(self.patch(x))
        x = torch.tanh(self.mix1(x))
        x = torch.tanh(self.mix2(x))
        return x.squeeze(0).permute(1, 2, 0)


def standin_backbone(seed: int, channels: int, stride: int, name: str | None = None) -> StandinBackbone:
    return StandinBackbone(seed=seed, channels=channels, stride=stride, name=name)


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    seed: int
    channels: int
    stride: int


DEFAULT_PANEL_SPECS = (
    BackboneSpec("vgg16_relu3_3", 101, 16, 8),
    BackboneSpec("dinov2_block6", 102, 24, 14),
    BackboneSpec("clip_block12", 103, 24, 14),
    BackboneSpec("sam_block6", 104, 16, 16),
)


def build_panel(specs: Sequence[BackboneSpec] = DEFAULT_PANEL_SPECS) -> list[StandinBackbone]:
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise ValueError(f"duplicate backbone names in panel: {dupes}")
    return [standin_backbone(s.seed, s.channels, s.stride, name=s.name) for s in specs]


def panel_hash(panel: Sequence[Backbone]) -> str:
    """SHA-256 over all backbone parameters; used to prove the panel stays frozen."""
    h = hashlib.sha256()
    for b in panel:
        h.update(b.name.encode())
        if isinstance(b, nn.Module):
            for pname, p in sorted(b.named_parameters()):
                h.update(pname.encode())
                h.update(p.detach().to(torch.float32).numpy().tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class PanelNormStats:
    """Per-backbone channel stds and dataset-mean feature variances, fitted
    once over the teacher-sample features and frozen thereafter."""

    names: tuple[str, ...]
    sigma_hat: tuple[np.ndarray, ...]
    mean_var: np.ndarray
    grid: int

    def __post_init__(self):
        if len(self.names) != len(self.sigma_hat) or len(self.names) != len(self.mean_var):
            raise ValueError("names, sigma_hat and mean_var must have equal length")
        for name, sig in zip(self.names, self.sigma_hat):
            if np.any(sig <= 0):
                raise ValueError(f"sigma_hat for {name!r} must be strictly positive")
        if np.any(self.mean_var < 0):
            raise ValueError("mean_var must be nonnegative")
        if self.grid < 1:
            raise ValueError("grid must be >= 1")

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"no normalization stats for backbone {name!r}") from None

    def sigma_for(self, name: str) -> np.ndarray:
        return self.sigma_hat[self.index(name)]


def _grid_features_t(b: Backbone, size: tuple[int, int], image: torch.Tensor) -> torch.Tensor:
    """Raw backbone features bilinearly resampled to (size[0], size[1], C)."""
    feats = b.extract(image)
    t = feats.permute(2, 0, 1).unsqueeze(0)
    t = F.interpolate(t, size=size, mode="bilinear", align_corners=True)
    return t.squeeze(0).permute(1, 2, 0)


def _as_size(grid: int | tuple[int, int]) -> tuple[int, int]:
    if isinstance(grid, int):
        return (grid, grid)
    return (int(grid[0]), int(grid[1]))


def normalized_features_t(
    b: Backbone,
    norms: PanelNormStats,
    image: torch.Tensor,
    grid: int | tuple[int, int] | None = None,
) -> torch.Tensor:
    """Differentiable path: extract, resample to the common grid, divide each
    channel by its fitted std. Shared by loss evaluation and target building.
    ``grid`` overrides the fitted grid size, e.g. for crop-aligned cells."""
    sigma = norms.sigma_for(b.name)
    if len(sigma) != b.channels:
        raise ValueError(
            f"backbone {b.name!r} has {b.channels} channels but norms carry {len(sigma)}"
        )
    size = _as_size(norms.grid if grid is None else grid)
    feats = _grid_features_t(b, size, image)
    return feats / torch.as_tensor(sigma, dtype=feats.dtype, device=feats.device)


def normalized_features(
    b: Backbone,
    norms: PanelNormStats,
    image: np.ndarray,
    grid: int | tuple[int, int] | None = None,
) -> np.ndarray:
    """Numpy wrapper around the shared feature path (float64 output)."""
    with torch.no_grad():
        t = normalized_features_t(
            b, norms, torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)), grid=grid
        )
    return t.numpy().astype(np.float64)


def _raw_grid_features(b: Backbone, grid: int, image: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        t = _grid_features_t(b, (grid, grid), torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)))
    return t.numpy().astype(np.float64)


def fit_norm_stats(
    panel: Sequence[Backbone],
    sample_sets: Sequence[TeacherSampleSet],
    grid: int = DEFAULT_GRID,
) -> PanelNormStats:
    """Two-pass pre-fit over teacher-sample features.

    Pass 1 pools raw grid features of every sample into per-channel stds
    (population; zero-variance channels fall back to 1). Pass 2 computes each
    image's spatially averaged feature variance in the normalized space and
    averages it over images.
    """
    if not sample_sets:
        raise ValueError("fit_norm_stats needs at least one sample set")
    names = tuple(b.name for b in panel)
    sigma_hat: list[np.ndarray] = []
    for b in panel:
        count = 0
        s1 = np.zeros(b.channels, dtype=np.float64)
        s2 = np.zeros(b.channels, dtype=np.float64)
        for sset in sample_sets:
            for sample in sset.samples:
                f = _raw_grid_features(b, grid, sample)
                count += f.shape[0] * f.shape[1]
                s1 += f.sum(axis=(0, 1))
                s2 += (f * f).sum(axis=(0, 1))
        mean = s1 / count
        var = np.maximum(s2 / count - mean * mean, 0.0)
        sig = np.sqrt(var)
        sig[sig == 0.0] = 1.0
        sigma_hat.append(sig)
    mean_var = np.zeros(len(panel), dtype=np.float64)
    for k, b in enumerate(panel):
        per_image = []
        for sset in sample_sets:
            feats = np.stack(
                [_raw_grid_features(b, grid, s) / sigma_hat[k] for s in sset.samples]
            )
            v = feats.var(axis=0, ddof=0).mean(axis=-1)
            per_image.append(v.mean())
        mean_var[k] = float(np.mean(per_image))
    return PanelNormStats(names=names, sigma_hat=tuple(sigma_hat), mean_var=mean_var, grid=grid)


def feature_variance(b: Backbone, norms: PanelNormStats, s: TeacherSampleSet) -> np.ndarray:
    """Population variance of normalized features over the ensemble, averaged
    over channels to one scalar per grid cell."""
    feats = np.stack([normalized_features(b, norms, sample) for sample in s.samples])
    return feats.var(axis=0, ddof=0).mean(axis=-1)


def feature_target(b: Backbone, norms: PanelNormStats, s: TeacherSampleSet) -> np.ndarray:
    """Mean of normalized per-sample features (not features of the pixel mean)."""
    feats = np.stack([normalized_features(b, norms, sample) for sample in s.samples])
    return feats.mean(axis=0)


def routing_weights(
    vars_: np.ndarray,
    norms: PanelNormStats,
    tau: float = DEFAULT_TAU,
    eps: float = ROUTING_EPS,
) -> np.ndarray:
    """Per-cell softmax over backbones of dataset-normalized feature variance.

    tau -> 0 approaches a per-cell argmax over backbones; large tau recovers
    uniform weighting.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    vars_ = np.asarray(vars_, dtype=np.float64)
    if vars_.ndim != 3 or vars_.shape[0] != len(norms.names):
        raise ValueError(
            f"expected variance stack of shape (K={len(norms.names)}, G, G), got {vars_.shape}"
        )
    if np.any(vars_ < 0):
        raise ValueError("variance stack must be nonnegative")
    scaled = vars_ / (norms.mean_var[:, None, None] + eps)
    z = scaled / tau
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def routing_entropy(routing: np.ndarray) -> np.ndarray:
    """Per-cell Shannon entropy (bits) of the routing field."""
    w = np.clip(routing, 1e-300, None)
    return -(w * np.log2(w)).sum(axis=0)


@dataclass(frozen=True)
class FeatureStats:
    """Feature-space supervision on the common grid: per-backbone targets,
    channel-aggregated variances and the routing field."""

    pair_id: str
    targets: tuple[np.ndarray, ...]
    var: np.ndarray
    routing: np.ndarray

    def __post_init__(self):
        k = len(self.targets)
        if self.var.shape[0] != k or self.routing.shape != self.var.shape:
            raise ValueError("targets, var and routing disagree on panel size or grid")
        if np.any(self.var < 0):
            raise ValueError("feature variance must be nonnegative")
        if np.any(self.routing < 0):
            raise ValueError("routing must be nonnegative")
        sums = self.routing.sum(axis=0)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ValueError("routing must sum to 1 over backbones at every cell")


def feature_stats(
    panel: Sequence[Backbone],
    norms: PanelNormStats,
    s: TeacherSampleSet,
    tau: float = DEFAULT_TAU,
    eps: float = ROUTING_EPS,
) -> FeatureStats:
    targets = tuple(feature_target(b, norms, s) for b in panel)
    var = np.stack([feature_variance(b, norms, s) for b in panel])
    routing = routing_weights(var, norms, tau=tau, eps=eps)
    return FeatureStats(pair_id=s.pair_id, targets=targets, var=var, routing=routing)
