"""Real-valued frequency features of image patches.

Each channel of a patch is transformed independently by an orthonormal 2-D
DFT (scaling 1/sqrt(U*V)); the conjugate-symmetric half of the last axis is
dropped and only the real (cosine-basis) component of the retained
coefficients is kept. High-frequency coefficients are typically much smaller
than low-frequency ones, so an optional signed-log compression is provided
for training stability.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import FormatError
from .imagedata import Patch, PatchRef

NORMALIZATION_MODES = ("none", "signed_log")

_MAGIC = b"SISLSPEC"


@dataclass
class SpectralFeature:
    """Per-channel real half-spectrum grid, shape C x U x (V//2 + 1)."""

    coefficients: np.ndarray
    source: PatchRef
    normalization: str = "none"

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.coefficients.shape


def rfft_features(patch: Patch) -> SpectralFeature:
    """Per-channel orthonormal real DFT of a patch, real components only.

    Pixels are interpreted as reals in [0, 255] and scaled to [0, 1] before
    the transform, so coefficient magnitudes are independent of bit depth.
    """
    x = patch.pixels.astype(np.float64) / 255.0
    if not np.isfinite(x).all():
        raise ValueError(f"non-finite pixel values in patch {patch.ref}")
    spec = np.fft.rfft2(x, axes=(0, 1), norm="ortho")
    coeffs = np.ascontiguousarray(spec.real.transpose(2, 0, 1))
    return SpectralFeature(coeffs, patch.ref, normalization="none")


def normalize_spectrum(feature: SpectralFeature, mode: str) -> SpectralFeature:
    """Apply elementwise magnitude normalization.

    mode="none" is the identity; mode="signed_log" maps each value x to
    sign(x) * log(1 + |x|), which preserves sign and magnitude order.
    """
    if mode not in NORMALIZATION_MODES:
        raise ValueError(f"unknown normalization mode {mode!r}, expected one of {NORMALIZATION_MODES}")
    if mode == "none":
        return replace(feature, coefficients=feature.coefficients.copy())
    c = feature.coefficients
    return replace(
        feature,
        coefficients=np.sign(c) * np.log1p(np.abs(c)),
        normalization="signed_log",
    )


def save_feature(feature: SpectralFeature, path: Path | str) -> None:
    """Debug dump: 20-byte header (magic + C, U, V//2+1 as LE uint32), then
    the coefficients as a flat little-endian float32 array."""
    c, u, vh = feature.coefficients.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", c, u, vh))
        fh.write(feature.coefficients.astype("<f4").tobytes())


def load_feature(path: Path | str) -> SpectralFeature:
    """Read a debug dump; provenance is not stored in the file."""
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:8] != _MAGIC:
        raise FormatError(f"not a spectral feature file: {path}")
    c, u, vh = struct.unpack("<III", data[8:20])
    expected = 20 + 4 * c * u * vh
    if len(data) != expected:
        raise FormatError(f"truncated spectral feature file: {path}")
    coeffs = np.frombuffer(data[20:], dtype="<f4").reshape(c, u, vh).astype(np.float64)
    return SpectralFeature(coeffs, PatchRef("", 0, 0), normalization="none")
