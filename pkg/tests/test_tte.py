import warnings

import numpy as np
import pytest

from pel.errors import ConfigError
from pel.rng import RngStream
from pel.tte import (
    TteConfig,
    bilinear_resize,
    crop_offsets,
    ensemble_logits,
    five_crops,
    validate_expand,
)


class TestResize:
    def test_same_size_is_identity(self):
        img = RngStream(0).uniform((3, 16, 16), 0, 255)
        out = bilinear_resize(img, 16)
        np.testing.assert_array_equal(out, img)

    def test_constant_image_stays_constant(self):
        img = np.full((3, 10, 10), 41.0, dtype=np.float32)
        out = bilinear_resize(img, 23)
        np.testing.assert_allclose(out, 41.0, atol=1e-4)

    def test_downscale_by_two_averages_quads(self):
        img = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
        out = bilinear_resize(img, 2)
        # corner-aligned-off: sample centers land between pixels -> 2x2 means
        expected = np.array([[[2.5, 4.5], [10.5, 12.5]]], dtype=np.float32)
        np.testing.assert_allclose(out, expected, atol=1e-5)

    def test_deterministic(self):
        img = RngStream(1).uniform((3, 17, 17), 0, 255)
        assert bilinear_resize(img, 31).tobytes() == bilinear_resize(img, 31).tobytes()


class TestFiveCrops:
    def test_paper_offsets_for_224_e24(self):
        assert crop_offsets(24) == [(12, 12), (0, 0), (0, 24), (24, 0), (24, 24)]

    def test_crop_geometry(self):
        img = RngStream(2).uniform((3, 64, 64), 0, 255)
        crops = five_crops(img, 32, 6)
        assert len(crops) == 5
        assert all(c.shape == (3, 32, 32) for c in crops)
        resized = bilinear_resize(img, 38)
        for crop, (r, c) in zip(crops, crop_offsets(6)):
            np.testing.assert_array_equal(crop, resized[:, r : r + 32, c : c + 32])

    def test_e_zero_crops_identical(self):
        img = RngStream(3).uniform((3, 48, 48), 0, 255)
        crops = five_crops(img, 32, 0)
        base = crops[0].tobytes()
        assert all(c.tobytes() == base for c in crops)

    def test_odd_expand_center_rounds_down(self):
        assert crop_offsets(7)[0] == (3, 3)


class TestEnsemble:
    def test_identical_logits_mean_is_input(self):
        z = RngStream(4).normal((10,))
        out = ensemble_logits([z] * 5)
        np.testing.assert_allclose(out, z, atol=1e-7)

    def test_basis_rows_average(self):
        rows = [3.0 * np.eye(5, dtype=np.float64)[i] for i in range(5)]
        np.testing.assert_allclose(ensemble_logits(rows), 0.6 * np.ones(5) * np.eye(5).sum(axis=0))

    def test_wrong_count_rejected(self):
        z = np.zeros(3)
        with pytest.raises(ValueError, match="exactly 5"):
            ensemble_logits([z] * 4)
        with pytest.raises(ValueError, match="exactly 5"):
            ensemble_logits([z] * 6)

    def test_matches_plain_mean(self):
        rng = RngStream(5)
        rows = [rng.normal((7,), dtype=np.float64) for _ in range(5)]
        np.testing.assert_allclose(ensemble_logits(rows), np.mean(rows, axis=0), atol=1e-12)


class TestValidateExpand:
    def test_default_24_with_patch_16_ok(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            assert validate_expand(24, 16) is None

    def test_multiple_of_patch_warns(self):
        with pytest.warns(UserWarning, match="multiple of the patch size"):
            msg = validate_expand(32, 16)
        assert msg is not None

    def test_zero_expand_ok(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            assert validate_expand(0, 16) is None


class TestTteConfig:
    def test_negative_expand_rejected(self):
        with pytest.raises(ConfigError):
            TteConfig(expand=-1)

    def test_round_trip(self):
        cfg = TteConfig(expand=24, enabled=True)
        assert TteConfig.from_json(cfg.to_json()) == cfg
