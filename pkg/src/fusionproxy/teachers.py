"""Stochastic fusion teachers, the 2N-sample ensemble protocol and its
pixel-space statistics.

A teacher is any object exposing ``name`` and ``sample(pair, rng)``; the
synthetic family below blends IR into VIS with a random convex weight plus
Gaussian noise, which keeps ensemble moments in closed form for testing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .images import FusedImage, ImagePair

PIXEL_WEIGHT_EPS = 1e-3


@runtime_checkable
class Teacher(Protocol):
    """Conditional stochastic sampler of fused images."""

    name: str

    def sample(self, x: ImagePair, rng: np.random.Generator) -> FusedImage: ...


@dataclass(frozen=True)
class TeacherProfile:
    """Synthetic teacher parameters.

    ``alpha`` is the IR blend weight drawn from U[a_lo, a_hi]; ``noise`` the
    per-pixel Gaussian sigma; ``block`` switches the alpha draw from one
    global value per sample to an independent value per block x block tile.
    """

    a_lo: float = 0.5
    a_hi: float = 0.5
    noise: float = 0.0
    block: int | None = None

    def __post_init__(self):
        if self.a_lo > self.a_hi:
            raise ValueError(f"blend range inverted: a_lo={self.a_lo} > a_hi={self.a_hi}")
        if self.noise < 0:
            raise ValueError(f"noise scale must be nonnegative, got {self.noise}")
        if self.block is not None and self.block < 1:
            raise ValueError(f"block size must be >= 1, got {self.block}")


@dataclass(frozen=True)
class SyntheticTeacher:
    name: str
    profile: TeacherProfile

    def sample(self, x: ImagePair, rng: np.random.Generator) -> FusedImage:
        h, w = x.ir.shape
        prof = self.profile
        if prof.block is None:
            alpha = np.full((h, w), rng.uniform(prof.a_lo, prof.a_hi))
        else:
            gh = -(-h // prof.block)
            gw = -(-w // prof.block)
            coarse = rng.uniform(prof.a_lo, prof.a_hi, size=(gh, gw))
            alpha = np.repeat(np.repeat(coarse, prof.block, 0), prof.block, 1)[:h, :w]
        fused = alpha[..., None] * x.ir[..., None] + (1.0 - alpha[..., None]) * x.vis
        if prof.noise > 0:
            fused = fused + rng.normal(0.0, prof.noise, size=fused.shape)
        fused = np.clip(fused, 0.0, 1.0).astype(np.float32)
        return FusedImage(pixels=fused, source_id=x.id)


def synthetic_teacher(name: str, profile: TeacherProfile) -> SyntheticTeacher:
    return SyntheticTeacher(name=name, profile=profile)


# Named profiles for the CLI. "det" collapses to a deterministic midpoint
# blend (zero ensemble variance), useful for overfit regressions.
TEACHER_PROFILES = {
    "synthA": TeacherProfile(a_lo=0.35, a_hi=0.75, noise=0.02, block=None),
    "synthB": TeacherProfile(a_lo=0.2, a_hi=0.6, noise=0.01, block=16),
    "det": TeacherProfile(a_lo=0.5, a_hi=0.5, noise=0.0, block=None),
}


def teacher_from_name(name: str) -> SyntheticTeacher:
    if name not in TEACHER_PROFILES:
        known = ", ".join(sorted(TEACHER_PROFILES))
        raise ValueError(f"unknown teacher {name!r}; available: {known}")
    return synthetic_teacher(name, TEACHER_PROFILES[name])


@dataclass(frozen=True)
class TeacherSampleSet:
    """The 2N fused samples drawn for one pair, with per-sample provenance."""

    pair_id: str
    samples: tuple[np.ndarray, ...]
    source: tuple[str, ...]

    def __post_init__(self):
        if not self.samples:
            raise ValueError("sample set must contain at least one sample")
        if len(self.samples) != len(self.source):
            raise ValueError("samples and source labels differ in length")
        shape = self.samples[0].shape
        for i, s in enumerate(self.samples):
            if s.shape != shape:
                raise ValueError(
                    f"sample {i} shape {s.shape} differs from {shape} in set {self.pair_id!r}"
                )

    def __len__(self) -> int:
        return len(self.samples)

    def stack(self) -> np.ndarray:
        return np.stack(self.samples, axis=0)


def draw_ensemble(
    teachers: Sequence[Teacher],
    x: ImagePair,
    n_per_teacher: int,
    rng: np.random.Generator,
) -> TeacherSampleSet:
    """Draw ``n_per_teacher`` samples from every teacher, round-robin
    interleaved so consecutive samples alternate sources."""
    if not teachers:
        raise ValueError("need at least one teacher")
    if n_per_teacher < 1:
        raise ValueError(f"n_per_teacher must be >= 1, got {n_per_teacher}")
    samples: list[np.ndarray] = []
    source: list[str] = []
    for _ in range(n_per_teacher):
        for t in teachers:
            y = t.sample(x, rng)
            if y.pixels.shape != (*x.ir.shape, 3):
                raise ValueError(
                    f"teacher {t.name!r} returned shape {y.pixels.shape}, "
                    f"expected {(*x.ir.shape, 3)}"
                )
            samples.append(y.pixels)
            source.append(t.name)
    return TeacherSampleSet(pair_id=x.id, samples=tuple(samples), source=tuple(source))


def ensemble_mean(s: TeacherSampleSet) -> np.ndarray:
    """Per-pixel, per-channel arithmetic mean over all samples (float64)."""
    return s.stack().astype(np.float64).mean(axis=0)


def pixel_variance(s: TeacherSampleSet) -> np.ndarray:
    """Population variance per pixel per channel, averaged over channels.

    The population form (divide by the sample count) keeps singleton
    ensembles legal with variance zero.
    """
    stack = s.stack().astype(np.float64)
    return stack.var(axis=0, ddof=0).mean(axis=-1)


def pixel_weights(var: np.ndarray, eps: float = PIXEL_WEIGHT_EPS) -> np.ndarray:
    """Inverse-variance weights normalized over the spatial domain."""
    if np.any(var < 0):
        raise ValueError("variance field must be nonnegative")
    inv = 1.0 / (np.asarray(var, dtype=np.float64) + eps)
    return inv / inv.sum()


@dataclass(frozen=True)
class EnsembleStats:
    """Pixel-space supervision: ensemble mean, scalar per-pixel variance and
    the normalized inverse-variance weight field."""

    pair_id: str
    mean: np.ndarray
    pixel_var: np.ndarray
    pixel_weights: np.ndarray

    def __post_init__(self):
        if self.mean.ndim != 3 or self.mean.shape[:2] != self.pixel_var.shape:
            raise ValueError("mean and pixel_var spatial shapes differ")
        if self.pixel_var.shape != self.pixel_weights.shape:
            raise ValueError("pixel_var and pixel_weights shapes differ")
        if np.any(self.pixel_var < 0):
            raise ValueError("pixel_var must be nonnegative")
        if np.any(self.pixel_weights <= 0):
            raise ValueError("pixel_weights must be strictly positive")
        if abs(float(self.pixel_weights.sum()) - 1.0) > 1e-6:
            raise ValueError("pixel_weights must sum to 1")


def ensemble_stats(s: TeacherSampleSet, eps: float = PIXEL_WEIGHT_EPS) -> EnsembleStats:
    var = pixel_variance(s)
    return EnsembleStats(
        pair_id=s.pair_id,
        mean=ensemble_mean(s),
        pixel_var=var,
        pixel_weights=pixel_weights(var, eps),
    )
