import numpy as np
import pytest

from fusionproxy.cache import CacheConfig, build_cache
from fusionproxy.images import resample_bilinear, save_png
from fusionproxy.panel import BackboneSpec

SMALL_PANEL = (BackboneSpec("bb_a", 11, 6, 4), BackboneSpec("bb_b", 12, 8, 8))


def write_dataset(root, n_pairs, height, width, seed=0, coarse=None):
    """Write a synthetic paired dataset. ``coarse`` gives the side of the
    low-resolution noise that is upsampled (smooth images); None keeps the
    noise at full resolution."""
    rng = np.random.default_rng(seed)
    ids = []
    for i in range(n_pairs):
        if coarse is None:
            ir = rng.random((height, width)).astype(np.float32)
            vis = rng.random((height, width, 3)).astype(np.float32)
        else:
            ir = resample_bilinear(
                rng.random((coarse, coarse)).astype(np.float32)[..., None], (height, width)
            )[..., 0]
            vis = resample_bilinear(
                rng.random((coarse, coarse, 3)).astype(np.float32), (height, width)
            )
        pid = f"p{i:02d}"
        save_png(root / "ir" / f"{pid}.png", ir)
        save_png(root / "vis" / f"{pid}.png", vis)
        ids.append(pid)
    return ids


@pytest.fixture(scope="session")
def small_cache(tmp_path_factory):
    """A tiny complete cache: 3 pairs of 48x64, two teachers, 8x8 grid,
    two-backbone panel. Shared read-only by many tests."""
    root = tmp_path_factory.mktemp("small_cache")
    data = root / "data"
    write_dataset(data, 3, 48, 64, seed=3)
    config = CacheConfig(teachers=("synthA", "det"), n_per_teacher=2, grid=8, tau=1.0, seed=5)
    manifest = build_cache(data, root / "cache", config, panel_specs=SMALL_PANEL)
    return {"root": root / "cache", "data": data, "config": config, "manifest": manifest}
