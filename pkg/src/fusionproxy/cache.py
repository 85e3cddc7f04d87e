"""Disk cache of teacher-ensemble statistics.

Layout under a cache root:

    manifest.json                     build config + per-pair tensor inventory
    norms/panel.json                  backbone panel + normalization descriptor
    norms/sigma_hat_<backbone>.fpx    per-channel feature stds
    norms/mean_var.fpx                dataset-mean feature variance per backbone
    <pair_id>/<tensor>.fpx            inputs, samples and compressed statistics

Per pair the tensors are: ir (H, W), vis (H, W, 3), samples (2N, H, W, 3),
mean (H, W, 3), pixel_var (H, W), pixel_weights (H, W), feat_var (K, G, G),
routing (K, G, G) and feat_target_<backbone> (G, G, C_k).

The manifest is written last, so its presence marks a complete build. A
rebuild with the same seed and config is byte-identical; a repeated build
call verifies the manifest instead of writing anything.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import fpx
from .images import load_dataset
from .panel import (
    DEFAULT_GRID,
    DEFAULT_TAU,
    BackboneSpec,
    FeatureStats,
    PanelNormStats,
    build_panel,
    feature_stats,
    fit_norm_stats,
)
from .teachers import (
    EnsembleStats,
    TeacherSampleSet,
    draw_ensemble,
    ensemble_stats,
    teacher_from_name,
)

CACHE_VERSION = "FPX1"
MANIFEST_NAME = "manifest.json"
NORMS_DIR = "norms"


@dataclass(frozen=True)
class CacheConfig:
    teachers: tuple[str, ...]
    n_per_teacher: int
    grid: int = DEFAULT_GRID
    tau: float = DEFAULT_TAU
    seed: int = 0

    def __post_init__(self):
        if not self.teachers:
            raise ValueError("at least one teacher is required")
        if self.n_per_teacher < 1:
            raise ValueError("n_per_teacher must be >= 1")
        if self.grid < 1:
            raise ValueError("grid must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    def as_dict(self) -> dict:
        return {
            "teachers": list(self.teachers),
            "n_per_teacher": self.n_per_teacher,
            "grid": self.grid,
            "tau": self.tau,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class CachedPair:
    """One pair's cached inputs and supervision statistics."""

    pair_id: str
    pad: tuple[int, int]
    ir: np.ndarray
    vis: np.ndarray
    ensemble: EnsembleStats
    feats: FeatureStats
    samples: np.ndarray | None = None


def load_manifest(cache_root: str | Path) -> dict:
    path = Path(cache_root) / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"no cache manifest at {path}")
    manifest = json.loads(path.read_text())
    version = manifest.get("version")
    if version != CACHE_VERSION:
        raise ValueError(
            f"cache version mismatch: manifest says {version!r}, reader supports {CACHE_VERSION!r}"
        )
    return manifest


def manifest_config(manifest: dict) -> CacheConfig:
    return CacheConfig(
        teachers=tuple(manifest["teachers"]),
        n_per_teacher=int(manifest["n_per_teacher"]),
        grid=int(manifest["grid"]),
        tau=float(manifest["tau"]),
        seed=int(manifest["seed"]),
    )


def list_pairs(manifest: dict) -> list[str]:
    return sorted(manifest["pairs"])


def _pair_dir(cache_root: str | Path, pair_id: str) -> Path:
    return Path(cache_root) / pair_id


def _write(path: Path, arr: np.ndarray) -> None:
    fpx.write_tensor(path, np.asarray(arr, dtype=np.float32))


def _read_checked(cache_root: Path, pair_id: str, name: str, dims: Sequence[int]) -> np.ndarray:
    path = _pair_dir(cache_root, pair_id) / f"{name}.fpx"
    arr = fpx.read_tensor(path)
    if tuple(arr.shape) != tuple(dims):
        raise ValueError(
            f"cache tensor {name!r} for pair {pair_id!r}: file shape {tuple(arr.shape)}, "
            f"manifest says {tuple(dims)}"
        )
    return arr


def verify_cache(cache_root: str | Path) -> list[str]:
    """Return a list of problems (empty when the cache checks out). Verifies
    tensor file headers against the manifest without reading payloads."""
    cache_root = Path(cache_root)
    problems: list[str] = []
    try:
        manifest = load_manifest(cache_root)
    except (FileNotFoundError, ValueError, json.JSONDecodeError) as exc:
        return [str(exc)]
    for pair_id, entry in manifest["pairs"].items():
        for name, dims in entry["tensors"].items():
            path = _pair_dir(cache_root, pair_id) / f"{name}.fpx"
            if not path.is_file():
                problems.append(f"missing tensor file {path}")
                continue
            try:
                actual = fpx.read_tensor_dims(path)
            except ValueError as exc:
                problems.append(f"{path}: {exc}")
                continue
            if tuple(actual) != tuple(dims):
                problems.append(
                    f"{path}: file dims {tuple(actual)} disagree with manifest {tuple(dims)}"
                )
    for fname in manifest.get("norms", {}).get("files", []):
        path = cache_root / fname
        if not path.is_file():
            problems.append(f"missing norms file {path}")
    if not (cache_root / NORMS_DIR / "panel.json").is_file():
        problems.append(f"missing {NORMS_DIR}/panel.json")
    return problems


def save_norms(
    cache_root: str | Path,
    specs: Sequence[BackboneSpec],
    norms: PanelNormStats,
    tau: float,
) -> list[str]:
    """Write the panel descriptor and normalization tensors; returns the
    relative file names for the manifest."""
    ndir = Path(cache_root) / NORMS_DIR
    ndir.mkdir(parents=True, exist_ok=True)
    files = []
    for spec, sigma in zip(specs, norms.sigma_hat):
        rel = f"{NORMS_DIR}/sigma_hat_{spec.name}.fpx"
        _write(Path(cache_root) / rel, sigma)
        files.append(rel)
    rel = f"{NORMS_DIR}/mean_var.fpx"
    _write(Path(cache_root) / rel, norms.mean_var)
    files.append(rel)
    descriptor = {
        "version": CACHE_VERSION,
        "grid": norms.grid,
        "tau": tau,
        "backbones": [
            {"name": s.name, "seed": s.seed, "channels": s.channels, "stride": s.stride}
            for s in specs
        ],
    }
    (ndir / "panel.json").write_text(json.dumps(descriptor, indent=2, sort_keys=True))
    return files


def load_norms(cache_root: str | Path):
    """Rebuild the frozen panel and its normalization stats from disk.

    Returns (panel, norms, tau). The stand-in encoders are reconstructed from
    their seeds, so features match the build bit for bit.
    """
    cache_root = Path(cache_root)
    desc_path = cache_root / NORMS_DIR / "panel.json"
    if not desc_path.is_file():
        raise FileNotFoundError(f"no panel descriptor at {desc_path}")
    descriptor = json.loads(desc_path.read_text())
    version = descriptor.get("version")
    if version != CACHE_VERSION:
        raise ValueError(
            f"cache version mismatch: panel descriptor says {version!r}, "
            f"reader supports {CACHE_VERSION!r}"
        )
    specs = [
        BackboneSpec(b["name"], int(b["seed"]), int(b["channels"]), int(b["stride"]))
        for b in descriptor["backbones"]
    ]
    panel = build_panel(specs)
    sigma = tuple(
        fpx.read_tensor(cache_root / NORMS_DIR / f"sigma_hat_{s.name}.fpx").astype(np.float64)
        for s in specs
    )
    mean_var = fpx.read_tensor(cache_root / NORMS_DIR / "mean_var.fpx").astype(np.float64)
    norms = PanelNormStats(
        names=tuple(s.name for s in specs),
        sigma_hat=sigma,
        mean_var=mean_var,
        grid=int(descriptor["grid"]),
    )
    return panel, norms, float(descriptor["tau"])


def load_pair(
    cache_root: str | Path,
    pair_id: str,
    manifest: dict | None = None,
    with_samples: bool = False,
) -> CachedPair:
    cache_root = Path(cache_root)
    if manifest is None:
        manifest = load_manifest(cache_root)
    if pair_id not in manifest["pairs"]:
        raise KeyError(f"pair {pair_id!r} not in cache manifest")
    entry = manifest["pairs"][pair_id]
    dims = entry["tensors"]

    def rd(name: str) -> np.ndarray:
        return _read_checked(cache_root, pair_id, name, dims[name])

    ensemble = EnsembleStats(
        pair_id=pair_id,
        mean=rd("mean").astype(np.float64),
        pixel_var=rd("pixel_var").astype(np.float64),
        pixel_weights=rd("pixel_weights").astype(np.float64),
    )
    target_names = sorted(n for n in dims if n.startswith("feat_target_"))
    order = entry["backbones"]
    targets = tuple(rd(f"feat_target_{b}").astype(np.float64) for b in order)
    if len(target_names) != len(order):
        raise ValueError(
            f"pair {pair_id!r}: {len(target_names)} target tensors for {len(order)} backbones"
        )
    feats = FeatureStats(
        pair_id=pair_id,
        targets=targets,
        var=rd("feat_var").astype(np.float64),
        routing=rd("routing").astype(np.float64),
    )
    return CachedPair(
        pair_id=pair_id,
        pad=tuple(entry["pad"]),
        ir=rd("ir"),
        vis=rd("vis"),
        ensemble=ensemble,
        feats=feats,
        samples=rd("samples") if with_samples else None,
    )


class _DiskSampleSets(Sequence):
    """Sequence view over cached sample tensors, read back on demand so the
    normalization fit does not need every ensemble in memory."""

    def __init__(self, cache_root: Path, pair_ids: Sequence[str]):
        self.cache_root = cache_root
        self.pair_ids = list(pair_ids)

    def __len__(self) -> int:
        return len(self.pair_ids)

    def __getitem__(self, i: int) -> TeacherSampleSet:
        pid = self.pair_ids[i]
        samples = fpx.read_tensor(_pair_dir(self.cache_root, pid) / "samples.fpx")
        return TeacherSampleSet(
            pair_id=pid,
            samples=tuple(samples[j] for j in range(samples.shape[0])),
            source=tuple("cached" for _ in range(samples.shape[0])),
        )


def build_cache(
    data_root: str | Path,
    cache_root: str | Path,
    config: CacheConfig,
    panel_specs: Sequence[BackboneSpec] | None = None,
    log: Callable[[str], None] | None = None,
) -> dict:
    """Draw teacher ensembles for every pair under ``data_root`` and write the
    compressed statistics cache. Returns the manifest.

    If a complete cache with the same config already exists it is verified
    and returned without any writes.
    """
    from .panel import DEFAULT_PANEL_SPECS

    torch.set_num_threads(1)
    cache_root = Path(cache_root)
    specs = tuple(panel_specs) if panel_specs is not None else DEFAULT_PANEL_SPECS
    say = log if log is not None else (lambda msg: None)

    manifest_path = cache_root / MANIFEST_NAME
    if manifest_path.is_file():
        try:
            existing = load_manifest(cache_root)
        except (ValueError, json.JSONDecodeError):
            existing = None
        if existing is not None and manifest_config(existing) == config:
            problems = verify_cache(cache_root)
            if not problems:
                say(f"cache at {cache_root} is complete and matches the config; nothing to do")
                return existing
            say(f"cache at {cache_root} is incomplete ({len(problems)} problems); rebuilding")

    pairs = load_dataset(data_root)
    teachers = [teacher_from_name(name) for name in config.teachers]
    panel = build_panel(specs)
    say(f"building cache for {len(pairs)} pairs with teachers {list(config.teachers)}")

    pair_entries: dict[str, dict] = {}
    for i, pair in enumerate(pairs):
        rng = np.random.default_rng([config.seed, i])
        sset = draw_ensemble(teachers, pair, config.n_per_teacher, rng)
        stats = ensemble_stats(sset)
        pdir = _pair_dir(cache_root, pair.id)
        pdir.mkdir(parents=True, exist_ok=True)
        tensors: dict[str, list[int]] = {}

        def put(name: str, arr: np.ndarray) -> None:
            arr32 = np.asarray(arr, dtype=np.float32)
            _write(pdir / f"{name}.fpx", arr32)
            tensors[name] = list(arr32.shape)

        put("ir", pair.ir)
        put("vis", pair.vis)
        put("samples", sset.stack())
        put("mean", stats.mean)
        put("pixel_var", stats.pixel_var)
        put("pixel_weights", stats.pixel_weights)
        pair_entries[pair.id] = {
            "pad": list(pair.pad),
            "height": pair.height,
            "width": pair.width,
            "backbones": [s.name for s in specs],
            "tensors": tensors,
        }
        say(f"  [{i + 1}/{len(pairs)}] {pair.id}: ensemble of {len(sset)} written")

    disk_sets = _DiskSampleSets(cache_root, [p.id for p in pairs])
    say("fitting panel normalization stats")
    norms = fit_norm_stats(panel, disk_sets, grid=config.grid)

    for i, pair in enumerate(pairs):
        sset = disk_sets[i]
        fs = feature_stats(panel, norms, sset, tau=config.tau)
        pdir = _pair_dir(cache_root, pair.id)
        tensors = pair_entries[pair.id]["tensors"]
        for name, arr in (
            ("feat_var", fs.var),
            ("routing", fs.routing),
            *((f"feat_target_{s.name}", t) for s, t in zip(specs, fs.targets)),
        ):
            arr32 = np.asarray(arr, dtype=np.float32)
            _write(pdir / f"{name}.fpx", arr32)
            tensors[name] = list(arr32.shape)
        say(f"  [{i + 1}/{len(pairs)}] {pair.id}: feature stats written")

    norm_files = save_norms(cache_root, specs, norms, config.tau)
    manifest = {
        "version": CACHE_VERSION,
        **config.as_dict(),
        "pairs": pair_entries,
        "norms": {"files": norm_files},
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    say(f"manifest written: {manifest_path}")
    return manifest
