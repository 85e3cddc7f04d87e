import json
import math

import numpy as np
import pytest

from fusionproxy.images import save_png
from fusionproxy.metrics import (
    entropy,
    evaluate_dir,
    evaluate_pair,
    mutual_information,
    q_abf,
    spatial_frequency,
    ssim_value,
)


def checkerboard(h, w, period=2):
    r = np.arange(h)[:, None] // period
    c = np.arange(w)[None, :] // period
    return ((r + c) % 2).astype(np.float64)


class TestEntropy:
    def test_constant_is_zero(self):
        assert entropy(np.full((32, 32), 0.5)) == 0.0

    def test_two_equal_levels_is_one_bit(self):
        img = np.zeros((32, 32))
        img[:, 16:] = 1.0
        assert entropy(img) == pytest.approx(1.0, abs=1e-12)

    def test_uniform_histogram_is_eight_bits(self):
        img = (np.arange(256, dtype=np.float64) / 255.0).reshape(16, 16)
        assert entropy(img) == pytest.approx(8.0, abs=1e-12)

    def test_skewed_levels_between(self):
        img = np.zeros((16, 16))
        img[0, 0] = 1.0
        assert 0.0 < entropy(img) < 1.0

    def test_rgb_uses_gray_conversion(self):
        rgb = np.zeros((16, 16, 3))
        rgb[:, 8:] = 1.0
        assert entropy(rgb) == pytest.approx(1.0, abs=1e-12)


class TestMutualInformation:
    def test_self_information_equals_entropies(self):
        img = checkerboard(32, 32, period=4)
        # MI(f, a) = H(a) when f == a; summed over both sources.
        assert mutual_information(img, img, img) == pytest.approx(2.0 * entropy(img), abs=1e-9)

    def test_independent_images_near_zero(self):
        rng = np.random.default_rng(0)
        a = (rng.random((64, 64)) > 0.5).astype(np.float64)
        b = (rng.random((64, 64)) > 0.5).astype(np.float64)
        fused = (rng.random((64, 64)) > 0.5).astype(np.float64)
        assert mutual_information(fused, a, b) < 0.05

    def test_additive_over_sources(self):
        rng = np.random.default_rng(1)
        ir = (rng.random((32, 32)) > 0.5).astype(np.float64)
        vis = (rng.random((32, 32)) > 0.5).astype(np.float64)
        got = mutual_information(ir, ir, vis)
        self_term = mutual_information(ir, ir, ir) / 2.0
        cross = mutual_information(vis, ir, ir) / 2.0
        assert got == pytest.approx(self_term + cross, abs=1e-9)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            mutual_information(np.zeros((8, 8)), np.zeros((8, 9)), np.zeros((8, 8)))


class TestSpatialFrequency:
    def test_constant_is_zero(self):
        assert spatial_frequency(np.full((16, 16), 0.3)) == 0.0

    def test_full_amplitude_checkerboard(self):
        img = checkerboard(64, 64, period=1)
        assert spatial_frequency(img) == pytest.approx(255.0 * math.sqrt(2.0), rel=1e-3)

    def test_vertical_stripes_row_only(self):
        img = np.zeros((32, 32))
        img[:, ::2] = 1.0
        sf = spatial_frequency(img)
        assert sf == pytest.approx(255.0, rel=2e-2)

    def test_single_column_image(self):
        img = np.linspace(0, 1, 16)[:, None]
        assert spatial_frequency(img) > 0.0

    def test_smoother_images_score_lower(self):
        sharp = checkerboard(32, 32, period=1)
        smooth = checkerboard(32, 32, period=8)
        assert spatial_frequency(smooth) < spatial_frequency(sharp)


class TestQabf:
    def test_self_fusion_maximal(self):
        rng = np.random.default_rng(2)
        img = rng.random((48, 48))
        score = q_abf(img, img, img)
        assert score >= 0.99
        assert score <= 1.0

    def test_constant_fused_low(self):
        rng = np.random.default_rng(3)
        ir = rng.random((48, 48))
        vis = rng.random((48, 48))
        assert q_abf(np.full((48, 48), 0.5), ir, vis) < 0.05

    def test_partial_degradation_ordered(self):
        rng = np.random.default_rng(4)
        ir = rng.random((48, 48))
        vis = rng.random((48, 48))
        avg = 0.5 * ir + 0.5 * vis
        noisy = np.clip(avg + 0.2 * rng.standard_normal((48, 48)), 0, 1)
        assert q_abf(noisy, ir, vis) < q_abf(avg, ir, vis)

    def test_all_flat_inputs_perfect(self):
        flat = np.full((32, 32), 0.5)
        assert q_abf(flat, flat, flat) == 1.0

    def test_range(self):
        rng = np.random.default_rng(5)
        for _ in range(3):
            f = rng.random((32, 32))
            a = rng.random((32, 32))
            b = rng.random((32, 32))
            assert 0.0 <= q_abf(f, a, b) <= 1.0


class TestSsimValue:
    def test_identity(self):
        img = np.random.default_rng(6).random((32, 32))
        assert ssim_value(img, img) == pytest.approx(1.0, abs=1e-9)

    def test_accepts_rgb(self):
        img = np.random.default_rng(7).random((16, 16, 3))
        assert ssim_value(img, img) == pytest.approx(1.0, abs=1e-9)

    def test_degrades_with_noise(self):
        rng = np.random.default_rng(8)
        img = rng.random((32, 32))
        noisy = np.clip(img + 0.3 * rng.standard_normal((32, 32)), 0, 1)
        assert ssim_value(img, noisy) < 0.9


class TestEvaluate:
    def test_pair_keys(self):
        rng = np.random.default_rng(9)
        out = evaluate_pair(rng.random((32, 32, 3)), rng.random((32, 32)), rng.random((32, 32, 3)))
        assert set(out) == {"entropy", "mutual_information", "spatial_frequency", "q_abf"}
        assert all(np.isfinite(v) for v in out.values())

    def _write_triplet(self, root, pid, seed):
        rng = np.random.default_rng(seed)
        save_png(root / "fused" / f"{pid}.png", rng.random((24, 24, 3)))
        save_png(root / "ir" / f"{pid}.png", rng.random((24, 24)))
        save_png(root / "vis" / f"{pid}.png", rng.random((24, 24, 3)))

    def test_directory_report(self, tmp_path):
        for i, pid in enumerate(["a", "b", "c"]):
            self._write_triplet(tmp_path, pid, i)
        report_path = tmp_path / "report.json"
        report = evaluate_dir(tmp_path / "fused", tmp_path / "ir", tmp_path / "vis", report_path)
        assert report["count"] == 3
        assert sorted(report["pairs"]) == ["a", "b", "c"]
        for metric, value in report["aggregate"].items():
            per_pair = [report["pairs"][p][metric] for p in report["pairs"]]
            assert value == pytest.approx(float(np.mean(per_pair)), rel=1e-12)
        on_disk = json.loads(report_path.read_text())
        assert on_disk == report

    def test_single_pair_aggregate_equals_pair(self, tmp_path):
        self._write_triplet(tmp_path, "only", 42)
        report = evaluate_dir(tmp_path / "fused", tmp_path / "ir", tmp_path / "vis")
        assert report["aggregate"] == report["pairs"]["only"]

    def test_missing_sources_listed(self, tmp_path):
        self._write_triplet(tmp_path, "a", 0)
        save_png(tmp_path / "fused" / "orphan.png", np.zeros((24, 24, 3)))
        with pytest.raises(FileNotFoundError, match="orphan"):
            evaluate_dir(tmp_path / "fused", tmp_path / "ir", tmp_path / "vis")

    def test_empty_fused_dir_rejected(self, tmp_path):
        (tmp_path / "fused").mkdir()
        with pytest.raises(FileNotFoundError, match="no fused"):
            evaluate_dir(tmp_path / "fused", tmp_path / "ir", tmp_path / "vis")
