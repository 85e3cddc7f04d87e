import numpy as np
import pytest

from fusionproxy.images import (
    AffinePerturbation,
    ImagePair,
    PerturbationSpec,
    apply_affine,
    load_dataset,
    load_png,
    pad_to_multiple,
    resample_bilinear,
    sample_perturbation,
    save_png,
)


def make_pair(h=32, w=32, seed=0, pid="p"):
    rng = np.random.default_rng(seed)
    return ImagePair(
        id=pid,
        ir=rng.random((h, w)).astype(np.float32),
        vis=rng.random((h, w, 3)).astype(np.float32),
    )


class TestImagePair:
    def test_valid(self):
        p = make_pair()
        assert p.height == 32 and p.width == 32

    def test_rejects_bad_ranks(self):
        with pytest.raises(ValueError, match="HxW"):
            ImagePair(id="x", ir=np.zeros((16, 16, 1), np.float32), vis=np.zeros((16, 16, 3), np.float32))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError, match="differ"):
            ImagePair(id="x", ir=np.zeros((16, 16), np.float32), vis=np.zeros((16, 32, 3), np.float32))

    def test_rejects_nonmultiple_dims(self):
        with pytest.raises(ValueError, match="multiples of 16"):
            ImagePair(id="x", ir=np.zeros((15, 16), np.float32), vis=np.zeros((15, 16, 3), np.float32))

    def test_rejects_out_of_range(self):
        ir = np.zeros((16, 16), np.float32)
        ir[0, 0] = 1.5
        with pytest.raises(ValueError, match="outside"):
            ImagePair(id="x", ir=ir, vis=np.zeros((16, 16, 3), np.float32))


class TestAffine:
    def test_identity_is_bitexact_copy(self):
        img = np.random.default_rng(0).random((20, 30)).astype(np.float32)
        out = apply_affine(img, AffinePerturbation())
        assert out is not img
        assert out.tobytes() == img.tobytes()

    def test_pure_translation_shifts_content(self):
        img = np.zeros((9, 9), np.float64)
        img[4, 4] = 1.0
        out = apply_affine(img, AffinePerturbation(dx=2.0))
        assert out[4, 6] == pytest.approx(1.0)
        assert out[4, 4] == pytest.approx(0.0)
        out = apply_affine(img, AffinePerturbation(dy=-3.0))
        assert out[1, 4] == pytest.approx(1.0)

    def test_constant_image_invariant(self):
        img = np.full((16, 16), 0.25, np.float32)
        out = apply_affine(img, AffinePerturbation(dx=3.7, dy=-1.2, theta=5.0))
        np.testing.assert_array_equal(out, img)

    def test_rotation_quarter_turn(self):
        img = np.zeros((9, 9), np.float64)
        img[4, 7] = 1.0
        out = apply_affine(img, AffinePerturbation(theta=90.0))
        # Content rotates with positive theta: right-of-center pixel moves below center.
        assert out[7, 4] == pytest.approx(1.0, abs=1e-9)

    def test_round_trip_translation(self):
        img = np.random.default_rng(1).random((33, 33))
        p = AffinePerturbation(dx=4.0, dy=-2.0)
        back = apply_affine(apply_affine(img, p), p.negate())
        inner = (slice(8, -8),) * 2
        np.testing.assert_allclose(back[inner], img[inner], atol=1e-12)

    def test_preserves_channels(self):
        img = np.random.default_rng(2).random((12, 12, 3)).astype(np.float32)
        out = apply_affine(img, AffinePerturbation(dx=0.5))
        assert out.shape == img.shape and out.dtype == np.float32

    def test_rejects_bad_rank(self):
        with pytest.raises(ValueError, match="2-D or 3-D"):
            apply_affine(np.zeros((2, 2, 2, 2)), AffinePerturbation(dx=1.0))


class TestPerturbationSampling:
    def test_within_ranges(self):
        rng = np.random.default_rng(0)
        spec = PerturbationSpec(max_translation=10.0, max_rotation=2.0)
        for _ in range(200):
            p = sample_perturbation(rng, spec)
            assert -10.0 <= p.dx <= 10.0 and -10.0 <= p.dy <= 10.0
            assert -2.0 <= p.theta <= 2.0

    def test_zero_spec_yields_identity(self):
        rng = np.random.default_rng(0)
        p = sample_perturbation(rng, PerturbationSpec(0.0, 0.0))
        assert p.is_identity()

    def test_negative_ranges_rejected(self):
        with pytest.raises(ValueError):
            PerturbationSpec(max_translation=-1.0)


class TestResample:
    def test_upsample_line_oracle(self):
        feat = np.array([[0.0, 1.0]])
        out = resample_bilinear(feat, (1, 3))
        np.testing.assert_allclose(out, [[0.0, 0.5, 1.0]])

    def test_corners_preserved(self):
        feat = np.random.default_rng(3).random((4, 4))
        out = resample_bilinear(feat, (11, 7))
        assert out[0, 0] == pytest.approx(feat[0, 0])
        assert out[-1, -1] == pytest.approx(feat[-1, -1])
        assert out[0, -1] == pytest.approx(feat[0, -1])

    def test_identity_size(self):
        feat = np.random.default_rng(4).random((5, 6, 2))
        np.testing.assert_allclose(resample_bilinear(feat, (5, 6)), feat, atol=1e-12)

    def test_single_point_target(self):
        feat = np.arange(4.0).reshape(2, 2)
        out = resample_bilinear(feat, (1, 1))
        assert out.shape == (1, 1) and out[0, 0] == feat[0, 0]

    def test_rejects_bad_target(self):
        with pytest.raises(ValueError, match="positive"):
            resample_bilinear(np.zeros((2, 2)), (0, 3))


class TestPadding:
    def test_noop_when_aligned(self):
        arr = np.ones((32, 48), np.float32)
        out, pad = pad_to_multiple(arr)
        assert out is arr and pad == (0, 0)

    def test_pads_bottom_right(self):
        arr = np.ones((30, 41, 3), np.float32)
        out, pad = pad_to_multiple(arr)
        assert out.shape == (32, 48, 3) and pad == (2, 7)
        assert out[31, 0, 0] == 0.0 and out[0, 0, 0] == 1.0


class TestPng:
    def test_round_trip_quantized(self, tmp_path):
        arr = np.random.default_rng(5).random((10, 12, 3)).astype(np.float32)
        save_png(tmp_path / "a.png", arr)
        back = load_png(tmp_path / "a.png", "RGB")
        assert np.abs(back - arr).max() <= 0.5 / 255.0 + 1e-6

    def test_grayscale_round_trip_exact_on_levels(self, tmp_path):
        arr = (np.arange(256, dtype=np.float32) / 255.0).reshape(16, 16)
        save_png(tmp_path / "g.png", arr)
        back = load_png(tmp_path / "g.png", "L")
        np.testing.assert_array_equal(back, arr)

    def test_creates_parent_dirs(self, tmp_path):
        save_png(tmp_path / "deep" / "dir" / "x.png", np.zeros((4, 4), np.float32))
        assert (tmp_path / "deep" / "dir" / "x.png").exists()


class TestLoadDataset:
    def _write(self, root, pid, h, w):
        rng = np.random.default_rng(hash(pid) % 2**32)
        save_png(root / "ir" / f"{pid}.png", rng.random((h, w)).astype(np.float32))
        save_png(root / "vis" / f"{pid}.png", rng.random((h, w, 3)).astype(np.float32))

    def test_sorted_and_padded(self, tmp_path):
        self._write(tmp_path, "b", 30, 41)
        self._write(tmp_path, "a", 32, 32)
        pairs = load_dataset(tmp_path)
        assert [p.id for p in pairs] == ["a", "b"]
        assert pairs[1].ir.shape == (32, 48) and pairs[1].pad == (2, 7)
        assert pairs[0].pad == (0, 0)

    def test_orphans_listed(self, tmp_path):
        self._write(tmp_path, "a", 16, 16)
        save_png(tmp_path / "ir" / "lonely.png", np.zeros((16, 16), np.float32))
        with pytest.raises(ValueError, match="lonely"):
            load_dataset(tmp_path)

    def test_shape_mismatch_names_pair(self, tmp_path):
        rng = np.random.default_rng(0)
        save_png(tmp_path / "ir" / "m.png", rng.random((16, 16)).astype(np.float32))
        save_png(tmp_path / "vis" / "m.png", rng.random((16, 32, 3)).astype(np.float32))
        with pytest.raises(ValueError, match="'m'"):
            load_dataset(tmp_path)

    def test_missing_dirs(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nope")

    def test_empty_dataset(self, tmp_path):
        (tmp_path / "ir").mkdir()
        (tmp_path / "vis").mkdir()
        with pytest.raises(ValueError, match="no PNG"):
            load_dataset(tmp_path)
