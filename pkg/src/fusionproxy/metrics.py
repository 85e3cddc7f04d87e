"""Reference-free and source-aware fusion quality metrics.

All functions take float images in [0, 1] ((H, W) or (H, W, 3)); color is
collapsed to the unweighted channel mean. Histogram metrics quantize to 8
bits; gradient metrics work on the 0..255 scale.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .images import load_png

Q_GAMMA_G = 0.9994
Q_K_G = -15.0
Q_D_G = 0.5
Q_GAMMA_A = 0.9879
Q_K_A = -22.0
Q_D_A = 0.8
# Per-pixel score of perfectly preserved edges (strength ratio 1, zero
# orientation difference); the sigmoids cap below 1 so scores are reported
# relative to this ceiling.
Q_CEILING = (Q_GAMMA_G / (1.0 + math.exp(Q_K_G * (1.0 - Q_D_G)))) * (
    Q_GAMMA_A / (1.0 + math.exp(Q_K_A * (1.0 - Q_D_A)))
)


def _gray(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    if arr.ndim != 2:
        raise ValueError(f"expected (H, W) or (H, W, C) image, got shape {arr.shape}")
    return arr


def _quantize(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(_gray(image) * 255.0), 0, 255).astype(np.uint8)


def entropy(image: np.ndarray) -> float:
    """Shannon entropy (bits) of the 8-bit intensity histogram."""
    hist = np.bincount(_quantize(image).ravel(), minlength=256).astype(np.float64)
    p = hist / hist.sum()
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def _entropy_of(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def _mi_two(a: np.ndarray, b: np.ndarray) -> float:
    qa = _quantize(a).ravel()
    qb = _quantize(b).ravel()
    if qa.shape != qb.shape:
        raise ValueError("images must share a size for mutual information")
    joint = np.zeros((256, 256), dtype=np.float64)
    np.add.at(joint, (qa, qb), 1.0)
    joint /= joint.sum()
    return _entropy_of(joint.sum(axis=1)) + _entropy_of(joint.sum(axis=0)) - _entropy_of(joint.ravel())


def mutual_information(fused: np.ndarray, ir: np.ndarray, vis: np.ndarray) -> float:
    """MI(fused; ir) + MI(fused; vis) in bits."""
    return _mi_two(fused, ir) + _mi_two(fused, vis)


def spatial_frequency(image: np.ndarray) -> float:
    """Root mean square of first differences along rows and columns, on the
    0..255 intensity scale."""
    g = _gray(image) * 255.0
    rf = float(np.mean(np.square(np.diff(g, axis=1)))) if g.shape[1] > 1 else 0.0
    cf = float(np.mean(np.square(np.diff(g, axis=0)))) if g.shape[0] > 1 else 0.0
    return math.sqrt(rf + cf)


def _sobel(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Replicate borders so constant images have exactly zero gradient;
    # zero padding would manufacture edges along the frame.
    p = np.pad(g, 1, mode="edge")
    tl, tc, tr = p[:-2, :-2], p[:-2, 1:-1], p[:-2, 2:]
    ml, mr = p[1:-1, :-2], p[1:-1, 2:]
    bl, bc, br = p[2:, :-2], p[2:, 1:-1], p[2:, 2:]
    gx = (tr + 2 * mr + br) - (tl + 2 * ml + bl)
    gy = (bl + 2 * bc + br) - (tl + 2 * tc + tr)
    return gx, gy


def _edge_fields(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx, gy = _sobel(_gray(image) * 255.0)
    strength = np.hypot(gx, gy)
    alpha = np.arctan2(gy, gx)
    alpha = np.mod(alpha + np.pi / 2, np.pi) - np.pi / 2
    return strength, alpha


def _edge_preservation(g_src, a_src, g_fus, a_fus) -> np.ndarray:
    hi = np.maximum(g_src, g_fus)
    lo = np.minimum(g_src, g_fus)
    ratio = np.where(hi > 0, lo / np.where(hi > 0, hi, 1.0), 1.0)
    q_g = Q_GAMMA_G / (1.0 + np.exp(Q_K_G * (ratio - Q_D_G)))
    da = np.abs(a_src - a_fus)
    da = np.minimum(da, np.pi - da)
    a_sim = 1.0 - da / (np.pi / 2)
    q_a = Q_GAMMA_A / (1.0 + np.exp(Q_K_A * (a_sim - Q_D_A)))
    return q_g * q_a


def q_abf(fused: np.ndarray, ir: np.ndarray, vis: np.ndarray) -> float:
    """Gradient-based edge transfer score.

    Compares Sobel edge strength and orientation of the fused image against
    each source; per-pixel sigmoid scores are weighted by source edge
    strength. Normalized by the perfect-preservation ceiling, so copying an
    edge-identical source scores 1.0. Edge-free inputs also score 1.0.
    """
    g_f, a_f = _edge_fields(fused)
    total_num = 0.0
    total_den = 0.0
    for src in (ir, vis):
        g_s, a_s = _edge_fields(src)
        q = _edge_preservation(g_s, a_s, g_f, a_f)
        total_num += float((q * g_s).sum())
        total_den += float(g_s.sum())
    if total_den == 0.0:
        return 1.0
    return float(min(1.0, max(0.0, total_num / total_den / Q_CEILING)))


def ssim_value(a: np.ndarray, b: np.ndarray) -> float:
    """Scalar SSIM between two numpy images ((H, W) or (H, W, C)), computed
    in double precision."""
    import torch

    from .losses import ssim

    aa = np.asarray(a, dtype=np.float64)
    bb = np.asarray(b, dtype=np.float64)
    if aa.ndim == 2:
        aa = aa[..., None]
    if bb.ndim == 2:
        bb = bb[..., None]
    return float(ssim(torch.from_numpy(aa), torch.from_numpy(bb)))


def evaluate_pair(fused: np.ndarray, ir: np.ndarray, vis: np.ndarray) -> dict[str, float]:
    return {
        "entropy": entropy(fused),
        "mutual_information": mutual_information(fused, ir, vis),
        "spatial_frequency": spatial_frequency(fused),
        "q_abf": q_abf(fused, ir, vis),
    }


def evaluate_dir(
    fused_dir: str | Path,
    ir_dir: str | Path,
    vis_dir: str | Path,
    report_path: str | Path | None = None,
) -> dict:
    """Score every fused image against its sources, matched by file stem.
    Optionally writes the report as JSON."""
    fused_dir, ir_dir, vis_dir = Path(fused_dir), Path(ir_dir), Path(vis_dir)
    fused_files = {p.stem: p for p in sorted(fused_dir.glob("*.png"))}
    ir_files = {p.stem: p for p in sorted(ir_dir.glob("*.png"))}
    vis_files = {p.stem: p for p in sorted(vis_dir.glob("*.png"))}
    if not fused_files:
        raise FileNotFoundError(f"no fused .png files under {fused_dir}")
    missing = sorted(set(fused_files) - (set(ir_files) & set(vis_files)))
    if missing:
        raise FileNotFoundError(f"no source images for fused ids: {missing}")
    per_pair = {}
    for stem, fpath in sorted(fused_files.items()):
        fused = load_png(fpath, mode="RGB")
        ir = load_png(ir_files[stem], mode="L")
        vis = load_png(vis_files[stem], mode="RGB")
        per_pair[stem] = evaluate_pair(fused, ir, vis)
    keys = ("entropy", "mutual_information", "spatial_frequency", "q_abf")
    aggregate = {k: float(np.mean([m[k] for m in per_pair.values()])) for k in keys}
    report = {"count": len(per_pair), "pairs": per_pair, "aggregate": aggregate}
    if report_path is not None:
        Path(report_path).parent.mkdir(parents=True, exist_ok=True)
        Path(report_path).write_text(json.dumps(report, indent=2, sort_keys=True))
    return report
