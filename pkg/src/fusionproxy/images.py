"""Image pairs, dataset loading, affine perturbation and bilinear resampling.

All arrays are channels-last float32/float64 with intensities in [0, 1].
Functions here are pure: inputs are never mutated and randomness always
comes from an explicitly passed generator.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

PAD_MULTIPLE = 16


@dataclass(frozen=True)
class ImagePair:
    """Aligned infrared-visible input: ir is H x W, vis is H x W x 3.

    Spatial dims are padded to multiples of 16 at load time (the student
    downsamples four times); ``pad`` records the (bottom, right) padding so
    outputs can be cropped back.
    """

    id: str
    ir: np.ndarray
    vis: np.ndarray
    pad: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.ir.ndim != 2 or self.vis.ndim != 3 or self.vis.shape[2] != 3:
            raise ValueError(
                f"pair {self.id!r}: ir must be HxW and vis HxWx3, "
                f"got {self.ir.shape} and {self.vis.shape}"
            )
        if self.ir.shape != self.vis.shape[:2]:
            raise ValueError(
                f"pair {self.id!r}: ir {self.ir.shape} and vis {self.vis.shape[:2]} "
                "spatial shapes differ"
            )
        h, w = self.ir.shape
        if h % PAD_MULTIPLE or w % PAD_MULTIPLE:
            raise ValueError(
                f"pair {self.id!r}: dims {h}x{w} must be multiples of {PAD_MULTIPLE}"
            )
        for name, arr in (("ir", self.ir), ("vis", self.vis)):
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise ValueError(f"pair {self.id!r}: {name} intensities outside [0, 1]")

    @property
    def height(self) -> int:
        return self.ir.shape[0]

    @property
    def width(self) -> int:
        return self.ir.shape[1]


@dataclass(frozen=True)
class FusedImage:
    """A fused H x W x 3 output in [0, 1] tagged with its source pair id."""

    pixels: np.ndarray
    source_id: str

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"fused image must be HxWx3, got {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("fused intensities outside [0, 1]")


@dataclass(frozen=True)
class AffinePerturbation:
    """Rigid misalignment: rotate by theta degrees about the image center,
    then translate by (dx, dy) pixels (positive = content moves right/down)."""

    dx: float = 0.0
    dy: float = 0.0
    theta: float = 0.0

    def negate(self) -> "AffinePerturbation":
        return AffinePerturbation(-self.dx, -self.dy, -self.theta)

    def is_identity(self) -> bool:
        return self.dx == 0.0 and self.dy == 0.0 and self.theta == 0.0


@dataclass(frozen=True)
class PerturbationSpec:
    """Uniform sampling ranges for misalignment injection."""

    max_translation: float = 10.0
    max_rotation: float = 2.0

    def __post_init__(self):
        if self.max_translation < 0 or self.max_rotation < 0:
            raise ValueError("perturbation ranges must be nonnegative")


def sample_perturbation(rng: np.random.Generator, spec: PerturbationSpec) -> AffinePerturbation:
    """Draw dx, dy ~ U[-max_t, max_t] and theta ~ U[-max_r, max_r]."""
    t = spec.max_translation
    r = spec.max_rotation
    dx = rng.uniform(-t, t) if t > 0 else 0.0
    dy = rng.uniform(-t, t) if t > 0 else 0.0
    theta = rng.uniform(-r, r) if r > 0 else 0.0
    return AffinePerturbation(dx=dx, dy=dy, theta=theta)


def _bilinear_gather(image: np.ndarray, src_r: np.ndarray, src_c: np.ndarray) -> np.ndarray:
    """Sample ``image`` at fractional (row, col) grids with replicate borders.

    Uses the lerp form a + w*(b-a) so constant regions are preserved exactly.
    """
    h, w = image.shape[:2]
    src_r = np.clip(src_r, 0.0, h - 1.0)
    src_c = np.clip(src_c, 0.0, w - 1.0)
    r0 = np.floor(src_r).astype(np.intp)
    c0 = np.floor(src_c).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = src_r - r0
    fc = src_c - c0
    if image.ndim == 3:
        fr = fr[..., None]
        fc = fc[..., None]
    top = image[r0, c0] + fc * (image[r0, c1] - image[r0, c0])
    bot = image[r1, c0] + fc * (image[r1, c1] - image[r1, c0])
    return top + fr * (bot - top)


def apply_affine(image: np.ndarray, p: AffinePerturbation) -> np.ndarray:
    """Warp a 2-D or 3-D image by ``p`` with bilinear interpolation.

    Rotation pivots on the image center; out-of-frame samples replicate the
    nearest border pixel. Identity perturbations return a bit-exact copy.
    """
    if image.ndim not in (2, 3):
        raise ValueError(f"expected 2-D or 3-D image, got ndim={image.ndim}")
    if p.is_identity():
        return image.copy()
    h, w = image.shape[:2]
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    theta = np.deg2rad(p.theta)
    cos_t = np.cos(theta)
    sin_t = np.sin(theta)
    rows, cols = np.meshgrid(
        np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij"
    )
    # Inverse map: undo translation, then rotate back about the center.
    x = cols - cx - p.dx
    y = rows - cy - p.dy
    src_c = cos_t * x + sin_t * y + cx
    src_r = -sin_t * x + cos_t * y + cy
    out = _bilinear_gather(image.astype(np.float64, copy=False), src_r, src_c)
    return out.astype(image.dtype, copy=False)


def resample_bilinear(feature: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear resampling of an h x w (x C) field to target (H', W')."""
    th, tw = target
    if th <= 0 or tw <= 0:
        raise ValueError(f"target dims must be positive, got {target}")
    if feature.ndim not in (2, 3):
        raise ValueError(f"expected 2-D or 3-D field, got ndim={feature.ndim}")
    h, w = feature.shape[:2]
    src_r = _corner_aligned_coords(h, th)
    src_c = _corner_aligned_coords(w, tw)
    grid_r, grid_c = np.meshgrid(src_r, src_c, indexing="ij")
    out = _bilinear_gather(feature.astype(np.float64, copy=False), grid_r, grid_c)
    return out.astype(feature.dtype, copy=False)


def _corner_aligned_coords(size: int, target: int) -> np.ndarray:
    if target == 1:
        return np.zeros(1, dtype=np.float64)
    return np.arange(target, dtype=np.float64) * ((size - 1) / (target - 1))


def pad_to_multiple(arr: np.ndarray, multiple: int = PAD_MULTIPLE) -> tuple[np.ndarray, tuple[int, int]]:
    """Zero-pad bottom/right so spatial dims are multiples of ``multiple``."""
    h, w = arr.shape[:2]
    pad_h = (-h) % multiple
    pad_w = (-w) % multiple
    if pad_h == 0 and pad_w == 0:
        return arr, (0, 0)
    pads = [(0, pad_h), (0, pad_w)] + [(0, 0)] * (arr.ndim - 2)
    return np.pad(arr, pads, mode="constant"), (pad_h, pad_w)


def load_png(path: str | Path, mode: str) -> np.ndarray:
    """Load an 8-bit PNG as float32 in [0, 1] (mode 'L' or 'RGB')."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert(mode), dtype=np.float32)
    return arr / 255.0


def save_png(path: str | Path, arr: np.ndarray) -> None:
    """Save a [0, 1] float array as an 8-bit PNG (grayscale or RGB)."""
    data = np.clip(np.round(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data).save(path, format="PNG")


def load_dataset(root: str | Path) -> list[ImagePair]:
    """Load all pairs under ``root/ir/<id>.png`` + ``root/vis/<id>.png``.

    Returns pairs sorted by id. Orphan files on either side and
    within-pair shape mismatches raise with the offending ids listed.
    """
    root = Path(root)
    ir_dir = root / "ir"
    vis_dir = root / "vis"
    if not ir_dir.is_dir() or not vis_dir.is_dir():
        raise FileNotFoundError(f"dataset root {root} must contain ir/ and vis/ subdirectories")
    ir_ids = {p.stem for p in ir_dir.glob("*.png")}
    vis_ids = {p.stem for p in vis_dir.glob("*.png")}
    orphans = sorted(ir_ids ^ vis_ids)
    if orphans:
        raise ValueError(f"unpaired dataset files (present on one side only): {orphans}")
    if not ir_ids:
        raise ValueError(f"no PNG pairs found under {root}")
    pairs = []
    for pid in sorted(ir_ids):
        ir = load_png(ir_dir / f"{pid}.png", "L")
        vis = load_png(vis_dir / f"{pid}.png", "RGB")
        if ir.shape != vis.shape[:2]:
            raise ValueError(
                f"pair {pid!r}: ir {ir.shape} and vis {vis.shape[:2]} shapes differ"
            )
        ir, pad = pad_to_multiple(ir)
        vis, _ = pad_to_multiple(vis)
        pairs.append(ImagePair(id=pid, ir=ir, vis=vis, pad=pad))
    return pairs
