"""Half-spectrum features checked against a direct cosine-sum oracle."""

from __future__ import annotations

import numpy as np
import pytest

from spectrace.errors import FormatError
from spectrace.imagedata import Patch
from spectrace.spectral import (
    NORMALIZATION_MODES,
    load_feature,
    normalize_spectrum,
    rfft_features,
    save_feature,
)


def cosine_sum_reference(pixels: np.ndarray) -> np.ndarray:
    """Direct O(U^2 V^2) evaluation: f(m, n) = (UV)^(-1/2) * sum over (u, v)
    of p(u, v) * cos(2*pi*(m*u/U + n*v/V)), keeping the non-redundant
    columns n = 0 .. floor(V/2)."""
    x = pixels.astype(np.float64) / 255.0
    u_size, v_size, channels = x.shape
    kept = v_size // 2 + 1
    u = np.arange(u_size)[:, None]
    v = np.arange(v_size)[None, :]
    out = np.zeros((channels, u_size, kept))
    for c in range(channels):
        for m in range(u_size):
            for n in range(kept):
                phase = 2.0 * np.pi * (m * u / u_size + n * v / v_size)
                out[c, m, n] = (x[:, :, c] * np.cos(phase)).sum() / np.sqrt(u_size * v_size)
    return out


class TestRfftFeatures:
    @pytest.mark.parametrize("size", [4, 8, 16])
    def test_matches_cosine_sum(self, size):
        rng = np.random.default_rng(size)
        for _ in range(4):
            pixels = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
            feature = rfft_features(Patch("t", 0, 0, pixels))
            np.testing.assert_allclose(
                feature.coefficients, cosine_sum_reference(pixels), atol=1e-6
            )

    def test_matches_cosine_sum_rectangular(self):
        rng = np.random.default_rng(99)
        pixels = rng.integers(0, 256, size=(4, 10, 3), dtype=np.uint8)
        feature = rfft_features(Patch("t", 0, 0, pixels))
        np.testing.assert_allclose(
            feature.coefficients, cosine_sum_reference(pixels), atol=1e-6
        )

    def test_constant_patch_is_pure_dc(self):
        pixels = np.full((8, 8, 3), 100, dtype=np.uint8)
        coeffs = rfft_features(Patch("t", 0, 0, pixels)).coefficients
        expected_dc = np.sqrt(64.0) * 100.0 / 255.0
        for c in range(3):
            assert abs(coeffs[c, 0, 0] - expected_dc) < 1e-5
        off_dc = coeffs.copy()
        off_dc[:, 0, 0] = 0.0
        assert np.abs(off_dc).max() < 1e-5

    def test_horizontal_tone_lands_on_two_rows(self):
        # p(u, v) = cos(2*pi*3u/U) concentrates at rows 3 and U-3, column 0
        u_size = 16
        tone = np.cos(2.0 * np.pi * 3.0 * np.arange(u_size) / u_size)
        pixels = np.repeat(
            np.round(127.5 + 100.0 * tone).astype(np.uint8)[:, None], u_size, axis=1
        )
        patch = Patch("t", 0, 0, np.repeat(pixels[:, :, None], 3, axis=2))
        coeffs = np.abs(rfft_features(patch).coefficients[0])
        flat = coeffs.copy()
        flat[0, 0] = 0.0  # ignore the DC offset
        top_two = {tuple(idx) for idx in np.argwhere(flat > 0.5 * flat.max())}
        assert top_two == {(3, 0), (u_size - 3, 0)}

    def test_shape_dtype_and_provenance(self):
        rng = np.random.default_rng(1)
        patch = Patch("img9", 32, 64, rng.integers(0, 256, (8, 12, 3), dtype=np.uint8))
        feature = rfft_features(patch)
        assert feature.coefficients.shape == (3, 8, 7)
        assert feature.coefficients.dtype == np.float64
        assert feature.coefficients.flags.c_contiguous
        assert feature.source == ("img9", 32, 64)
        assert feature.normalization == "none"

    def test_nonfinite_pixels_rejected(self):
        pixels = np.zeros((4, 4, 3))
        pixels[1, 2, 0] = np.nan
        with pytest.raises(ValueError):
            rfft_features(Patch("t", 0, 0, pixels))


class TestNormalization:
    def test_none_is_identity_copy(self):
        rng = np.random.default_rng(2)
        feature = rfft_features(Patch("t", 0, 0, rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)))
        out = normalize_spectrum(feature, "none")
        np.testing.assert_array_equal(out.coefficients, feature.coefficients)
        assert out.coefficients is not feature.coefficients

    def test_signed_log_definition_and_sign(self):
        rng = np.random.default_rng(3)
        feature = rfft_features(Patch("t", 0, 0, rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)))
        out = normalize_spectrum(feature, "signed_log")
        x = feature.coefficients
        np.testing.assert_allclose(out.coefficients, np.sign(x) * np.log1p(np.abs(x)), atol=1e-12)
        assert out.normalization == "signed_log"
        # magnitudes shrink, order relations survive
        assert (np.abs(out.coefficients) <= np.abs(x) + 1e-12).all()

    def test_unknown_mode_rejected(self):
        rng = np.random.default_rng(4)
        feature = rfft_features(Patch("t", 0, 0, rng.integers(0, 256, (4, 4, 3), dtype=np.uint8)))
        with pytest.raises(ValueError):
            normalize_spectrum(feature, "log")
        assert set(NORMALIZATION_MODES) == {"none", "signed_log"}


class TestFeatureFiles:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        feature = rfft_features(Patch("t", 0, 0, rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)))
        path = tmp_path / "f.spec"
        save_feature(feature, path)
        loaded = load_feature(path)
        assert loaded.coefficients.shape == feature.coefficients.shape
        np.testing.assert_allclose(loaded.coefficients, feature.coefficients, atol=1e-5)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.spec"
        path.write_bytes(b"NOTSPECX" + b"\x00" * 32)
        with pytest.raises(FormatError):
            load_feature(path)

    def test_truncation_rejected(self, tmp_path):
        rng = np.random.default_rng(6)
        feature = rfft_features(Patch("t", 0, 0, rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)))
        path = tmp_path / "f.spec"
        save_feature(feature, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 7])
        with pytest.raises(FormatError):
            load_feature(path)
