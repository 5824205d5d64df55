import hashlib
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import checkerboard, global_equalization
from sacropipe import imgproc
from sacropipe.errors import ParameterError
from sacropipe.manifest import read_png

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN_SHA256 = "9f01d82553f456fe8789650e506b016aa21c11d9509064f2772a1463344c4ff9"


class TestClahe:
    def test_golden_checkerboard_hand_values(self):
        # clip = 8 per bin; excess (512 - 8) * 2 spread as 3.9375 per bin
        out = imgproc.clahe(checkerboard(), imgproc.ClaheParams((2, 2), 2.0))
        low = np.rint((65 * 3.9375 + 8) / 1024 * 255)
        high = np.rint((193 * 3.9375 + 16) / 1024 * 255)
        assert (low, high) == (66, 193)
        assert set(np.unique(out)) == {low, high}
        assert (out[checkerboard() == 64] == low).all()

    def test_golden_hash(self):
        img = read_png(FIXTURES / "checkerboard_input.png")
        assert np.array_equal(img, checkerboard())
        out = imgproc.clahe(img, imgproc.ClaheParams((2, 2), 2.0))
        assert hashlib.sha256(out.tobytes()).hexdigest() == GOLDEN_SHA256
        assert np.array_equal(out, read_png(FIXTURES / "checkerboard_clahe_golden.png"))

    @pytest.mark.parametrize("dtype", [np.uint8, np.uint16])
    def test_global_oracle(self, dtype):
        rng = np.random.default_rng(0)
        for _ in range(10):
            img = rng.integers(0, np.iinfo(dtype).max + 1, (37, 53)).astype(dtype)
            img[:5] = img[0, 0]  # ties
            out = imgproc.clahe(img, imgproc.ClaheParams((1, 1), np.inf))
            assert np.array_equal(out, global_equalization(img))

    def test_constant_image(self):
        out = imgproc.clahe(np.full((32, 32), 77, np.uint8), imgproc.ClaheParams((4, 4)))
        assert len(np.unique(out)) == 1

    def test_dtype_and_range(self):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 65536, (64, 96)).astype(np.uint16)
        out = imgproc.clahe(img)
        assert out.dtype == np.uint16

    def test_monotone_within_tile_mapping(self):
        rng = np.random.default_rng(2)
        img = rng.integers(0, 256, (64, 64)).astype(np.uint8)
        maps, _, _ = imgproc.clahe_mappings(img, imgproc.ClaheParams((4, 4), 3.0))
        assert (np.diff(maps, axis=-1) >= -1e-12).all()

    def test_single_tile_is_monotone(self):
        rng = np.random.default_rng(3)
        img = rng.integers(0, 256, (40, 40)).astype(np.uint8)
        out = imgproc.clahe(img, imgproc.ClaheParams((1, 1), 2.0))
        order = np.argsort(img.ravel(), kind="stable")
        assert (np.diff(out.ravel()[order].astype(int)) >= 0).all()

    def test_tile_too_small(self):
        with pytest.raises(ParameterError):
            imgproc.clahe(np.zeros((8, 8), np.uint8), imgproc.ClaheParams((8, 8)))

    def test_bad_params(self):
        with pytest.raises(ParameterError):
            imgproc.ClaheParams(clip_limit=0)
        with pytest.raises(ParameterError):
            imgproc.clahe(np.zeros((8, 8), np.float32), imgproc.ClaheParams((1, 1)))

    def test_stable_across_runs(self):
        rng = np.random.default_rng(4)
        img = rng.integers(0, 65536, (80, 120)).astype(np.uint16)
        assert np.array_equal(imgproc.clahe(img), imgproc.clahe(img.copy()))


class TestResize:
    def test_identity(self):
        img = np.arange(12, dtype=np.uint16).reshape(3, 4)
        out = imgproc.resize(img, 3, 4)
        assert out.tobytes() == img.tobytes() and out is not img

    def test_ramp_halving(self):
        img = np.arange(16, dtype=float).reshape(4, 4)
        out = imgproc.resize(img, 2, 2, "bilinear")
        # each output pixel centers on a 2x2 block: the block mean
        expected = np.array([[(0 + 1 + 4 + 5) / 4, (2 + 3 + 6 + 7) / 4],
                             [(8 + 9 + 12 + 13) / 4, (10 + 11 + 14 + 15) / 4]])
        assert np.allclose(out, expected)

    def test_nearest_label_subset(self):
        rng = np.random.default_rng(5)
        mask = rng.integers(0, 3, (41, 67)).astype(np.uint8)
        out = imgproc.resize(mask, 128, 128, "nearest")
        assert set(np.unique(out)) <= set(np.unique(mask))

    def test_bad_target(self):
        with pytest.raises(ParameterError):
            imgproc.resize(np.zeros((4, 4)), 0, 3)


class TestCenterCrop:
    def test_wide_input_trims_columns(self):
        img = np.arange(10 * 30).reshape(10, 30)
        out = imgproc.center_crop_to_aspect(img, 1 / 1.5)
        assert out.shape == (10, 15) and out[0, 0] == img[0, 7]

    def test_tall_input_trims_rows(self):
        img = np.arange(20 * 10).reshape(20, 10)
        out = imgproc.center_crop_to_aspect(img, 0.5)
        assert out.shape == (5, 10) and out[0, 0] == img[7, 0]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(8, 200), st.integers(8, 200))
    def test_aspect_within_rounding(self, h, w):
        out = imgproc.center_crop_to_aspect(np.zeros((h, w)), 416 / 628)
        oh, ow = out.shape
        assert oh <= h and ow <= w and (oh == h or ow == w)
        assert abs(oh - ow * 416 / 628) <= 1


class TestZnormalize:
    def test_constant(self):
        assert (imgproc.znormalize(np.full((5, 5), 3.0)) == 0).all()

    def test_two_pixels(self):
        assert np.allclose(imgproc.znormalize(np.array([0.0, 2.0])), [-1, 1])

    @given(st.integers(0, 10_000))
    @settings(max_examples=20)
    def test_moments(self, seed):
        x = np.random.default_rng(seed).normal(3, 7, (20, 30))
        z = imgproc.znormalize(x)
        assert abs(z.mean()) < 1e-6 and abs(z.std() - 1) < 1e-6


class TestAugment:
    def test_identity(self):
        rng = np.random.default_rng(0)
        img = rng.random((30, 40))
        mask = rng.integers(0, 3, (30, 40)).astype(np.uint8)
        out, m = imgproc.augment(img, mask, imgproc.NO_AUGMENT, rng)
        assert np.array_equal(out, img) and np.array_equal(m, mask)

    def test_rotation_bound(self):
        rng = np.random.default_rng(1)
        p = imgproc.AugmentParams()
        rots = np.array([imgproc.draw_augmentation(p, rng).rotation_deg for _ in range(100_000)])
        assert np.abs(rots).max() <= 10.0

    def test_rotation_limit_enforced(self):
        with pytest.raises(ParameterError):
            imgproc.AugmentParams(max_rotation_deg=15)

    def test_double_flip(self):
        img = np.random.default_rng(2).random((10, 12))
        draw = imgproc.AugmentDraw(True, 0.0, 1.0, 0.0, 0.0, 1.0)
        once = imgproc.apply_geometry(img, draw, 1)
        assert not np.array_equal(once, img)
        assert np.array_equal(imgproc.apply_geometry(once, draw, 1), img)

    def test_mask_labels_preserved(self):
        rng = np.random.default_rng(3)
        mask = np.zeros((64, 64), np.uint8)
        mask[10:40, 10:30] = 1
        mask[20:50, 35:55] = 2
        for _ in range(20):
            _, m = imgproc.augment(mask.astype(float), mask, imgproc.SEGMENTATION_AUGMENT, rng)
            assert set(np.unique(m)) <= {0, 1, 2}

    def test_reproducible(self):
        img = np.random.default_rng(4).random((32, 32))
        a = imgproc.augment(img, None, imgproc.SEGMENTATION_AUGMENT, np.random.default_rng(9))[0]
        b = imgproc.augment(img, None, imgproc.SEGMENTATION_AUGMENT, np.random.default_rng(9))[0]
        assert np.array_equal(a, b)

    def test_mismatched_mask(self):
        with pytest.raises(ParameterError):
            imgproc.augment(np.zeros((4, 4)), np.zeros((4, 5)), imgproc.NO_AUGMENT,
                            np.random.default_rng(0))


class TestMixup:
    def test_forced_one(self):
        a, b = np.ones(4), np.zeros(4)
        x, lam = imgproc.mixup(a, b, 1, 0, imgproc.MixupParams(), None, lam=1.0)
        assert np.array_equal(x, a) and lam == 1.0

    def test_midpoint(self):
        a, b = np.array([0.0, 2.0]), np.array([2.0, 4.0])
        x, _ = imgproc.mixup(a, b, 0, 1, imgproc.MixupParams(), None, lam=0.5)
        assert np.array_equal(x, [1.0, 3.0])

    def test_lambda_mean(self):
        rng = np.random.default_rng(5)
        lams = [imgproc.mixup(np.zeros(1), np.zeros(1), 0, 0, imgproc.MixupParams(0.2), rng)[1]
                for _ in range(100_000)]
        assert abs(np.mean(lams) - 0.5) <= 0.01

    @given(st.integers(0, 10_000))
    @settings(max_examples=30)
    def test_convex_hull(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=8), rng.normal(size=8)
        x, _ = imgproc.mixup(a, b, 0, 1, imgproc.MixupParams(0.4), rng)
        assert (x >= np.minimum(a, b) - 1e-12).all() and (x <= np.maximum(a, b) + 1e-12).all()

    def test_torch_inputs(self):
        a, b = torch.ones(2, 1, 4, 4), torch.zeros(2, 1, 4, 4)
        x, lam = imgproc.mixup(a, b, 0, 1, imgproc.MixupParams(), np.random.default_rng(0))
        assert torch.allclose(x, torch.full_like(a, lam))

    def test_bad_alpha(self):
        with pytest.raises(ParameterError):
            imgproc.MixupParams(alpha=0)
