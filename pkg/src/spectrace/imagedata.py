"""Image I/O, patch extraction and sampling, dataset manifests, and the
synthetic two-signature splice generator used for desk-scale validation.

All operations are pure given (inputs, seed); nothing here keeps shared
mutable state, so everything is safe to call concurrently across images.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence, Union

import numpy as np
from PIL import Image, ImageDraw, UnidentifiedImageError

from .errors import DataError

LABELS = ("authentic", "spliced")


class PatchRef(NamedTuple):
    """Provenance of a patch: source image id and top-left offset."""

    source_id: str
    top: int
    left: int


@dataclass
class ImageRecord:
    """A decoded RGB raster with an opaque id. pixels is H x W x 3 uint8."""

    image_id: str
    pixels: np.ndarray

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class Patch:
    """A verbatim U x V x 3 crop of a source image (no resampling)."""

    source_id: str
    top: int
    left: int
    pixels: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    @property
    def ref(self) -> PatchRef:
        return PatchRef(self.source_id, self.top, self.left)


@dataclass
class PatchGrid:
    """Row-major grid of overlapping patches extracted at a fixed stride."""

    stride: int
    rows: int
    cols: int
    patches: list[Patch]

    @property
    def count(self) -> int:
        return self.rows * self.cols

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols


def load_image(path: Path | str, image_id: str | None = None) -> ImageRecord:
    """Decode a PNG/JPEG raster to an RGB ImageRecord.

    Grayscale inputs are replicated to 3 channels with a warning; images
    with an alpha channel are flattened to RGB.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image file: {path}")
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode in ("L", "LA", "I", "I;16", "1"):
                warnings.warn(f"{path}: grayscale input replicated to 3 channels")
                img = img.convert("L").convert("RGB")
            elif mode != "RGB":
                img = img.convert("RGB")
            pixels = np.asarray(img, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise DataError(f"cannot decode image: {path}") from exc
    except OSError as exc:
        raise DataError(f"failed to read image {path}: {exc}") from exc
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise DataError(f"expected a 3-channel raster after decode: {path}")
    return ImageRecord(image_id or path.stem, pixels)


def save_image(record: ImageRecord, path: Path | str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(record.pixels, mode="RGB").save(path)


def _check_patch_fits(image: ImageRecord, size: tuple[int, int]) -> None:
    u, v = size
    if u < 1 or v < 1:
        raise ValueError(f"patch size must be positive, got {size}")
    if u > image.height or v > image.width:
        raise ValueError(
            f"patch {u}x{v} larger than image {image.height}x{image.width} "
            f"({image.image_id})"
        )


def extract_grid_patches(
    image: ImageRecord, size: tuple[int, int], stride: int
) -> PatchGrid:
    """Extract all fully contained patches at offsets (i*stride, j*stride).

    Only crops that fit entirely inside the image are produced, so
    rows = (H-U)//stride + 1 and cols = (W-V)//stride + 1.
    """
    _check_patch_fits(image, size)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    u, v = size
    rows = (image.height - u) // stride + 1
    cols = (image.width - v) // stride + 1
    patches = []
    for i in range(rows):
        for j in range(cols):
            top, left = i * stride, j * stride
            crop = image.pixels[top : top + u, left : left + v].copy()
            patches.append(Patch(image.image_id, top, left, crop))
    return PatchGrid(stride, rows, cols, patches)


def sample_training_patches(
    image: ImageRecord,
    count: int,
    size: tuple[int, int],
    seed: int | np.random.SeedSequence | Sequence[int],
) -> list[Patch]:
    """Crop `count` patches at uniformly random fully contained offsets.

    Deterministic given the seed; duplicate offsets are permitted.
    """
    _check_patch_fits(image, size)
    u, v = size
    rng = np.random.default_rng(seed)
    tops = rng.integers(0, image.height - u + 1, size=count)
    lefts = rng.integers(0, image.width - v + 1, size=count)
    return [
        Patch(
            image.image_id,
            int(t),
            int(l),
            image.pixels[t : t + u, l : l + v].copy(),
        )
        for t, l in zip(tops, lefts)
    ]


# ---------------------------------------------------------------------------
# Dataset manifests
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    path: Path
    image_id: str
    mask_path: Path | None
    label: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def by_id(self, image_id: str) -> ManifestEntry:
        for entry in self.entries:
            if entry.image_id == image_id:
                return entry
        raise KeyError(image_id)


def load_manifest(path: Path | str) -> DatasetManifest:
    """Parse a manifest file: one `path,id,mask_path,label` record per line.

    Relative paths are resolved against the manifest's directory. mask_path
    may be empty; label must be `authentic` or `spliced`. Image ids must be
    unique.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such manifest: {path}")
    root = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 comma-separated fields")
        img, image_id, mask, label = parts
        if label not in LABELS:
            raise DataError(f"{path}:{lineno}: label must be one of {LABELS}")
        if image_id in seen:
            raise DataError(f"{path}:{lineno}: duplicate image id {image_id!r}")
        seen.add(image_id)
        img_path = Path(img) if Path(img).is_absolute() else root / img
        mask_path = None
        if mask:
            mask_path = Path(mask) if Path(mask).is_absolute() else root / mask
        entries.append(ManifestEntry(img_path, image_id, mask_path, label))
    return DatasetManifest(entries)


def save_manifest(manifest: DatasetManifest, path: Path | str) -> None:
    """Write a manifest; paths below the manifest directory become relative."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    root = path.parent.resolve()

    def _fmt(p: Path | None) -> str:
        if p is None:
            return ""
        try:
            return str(p.resolve().relative_to(root))
        except ValueError:
            return str(p)

    lines = [
        f"{_fmt(e.path)},{e.image_id},{_fmt(e.mask_path)},{e.label}"
        for e in manifest.entries
    ]
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def load_mask(path: Path | str, expect_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Load an 8-bit PNG ground-truth mask; any nonzero pixel counts as spliced."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such mask file: {path}")
    with Image.open(path) as img:
        mask = np.asarray(img.convert("L")) > 0
    if expect_shape is not None and mask.shape != expect_shape:
        raise DataError(
            f"mask {path} has shape {mask.shape}, expected {expect_shape}"
        )
    return mask


def save_mask(mask: np.ndarray, path: Path | str) -> None:
    """Write a boolean mask as an 8-bit PNG (0 = authentic, 255 = spliced)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    data = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


# ---------------------------------------------------------------------------
# Synthetic signatures and splices
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SignatureParams:
    """Parameters of a synthetic camera-style fingerprint.

    The fingerprint is additive Gaussian noise shaped by a radial band-pass
    power-spectrum envelope (band_center/band_width in cycles per pixel,
    i.e. within [0, 0.5]), optionally followed by block-frequency
    quantization of strength quant_strength (0 disables it).
    """

    noise_strength: float = 0.03
    band_center: float = 0.35
    band_width: float = 0.08
    quant_strength: float = 0.0


@dataclass(frozen=True)
class RectRegion:
    top: int
    left: int
    height: int
    width: int

    def mask(self, h: int, w: int) -> np.ndarray:
        m = np.zeros((h, w), dtype=bool)
        m[self.top : self.top + self.height, self.left : self.left + self.width] = True
        return m

    def inside(self, h: int, w: int) -> bool:
        return (
            0 <= self.top
            and 0 <= self.left
            and self.height > 0
            and self.width > 0
            and self.top + self.height <= h
            and self.left + self.width <= w
        )


@dataclass(frozen=True)
class PolygonRegion:
    """Polygon in (row, col) host coordinates, rasterized inclusively."""

    vertices: tuple[tuple[int, int], ...]

    def mask(self, h: int, w: int) -> np.ndarray:
        img = Image.new("1", (w, h), 0)
        xy = [(c, r) for r, c in self.vertices]
        ImageDraw.Draw(img).polygon(xy, outline=1, fill=1)
        return np.asarray(img, dtype=bool)

    def inside(self, h: int, w: int) -> bool:
        if len(self.vertices) < 3:
            return False
        return all(0 <= r < h and 0 <= c < w for r, c in self.vertices)


Region = Union[RectRegion, PolygonRegion]


@dataclass(frozen=True)
class SpliceSpec:
    donor_id: str
    host_id: str
    region: Region
    signature_a: SignatureParams
    signature_b: SignatureParams


def _radial_envelope(h: int, w: int, center: float, width: float) -> np.ndarray:
    fr = np.fft.fftfreq(h)[:, None]
    fc = np.fft.fftfreq(w)[None, :]
    r = np.sqrt(fr**2 + fc**2)
    return np.exp(-0.5 * ((r - center) / width) ** 2)


def _quantize_blocks(x: np.ndarray, step: float, block: int = 8) -> np.ndarray:
    """Quantize per-block frequency coefficients; mimics compression traces."""
    h, w = x.shape
    hb, wb = h - h % block, w - w % block
    out = x.copy()
    blocks = out[:hb, :wb].reshape(hb // block, block, wb // block, block)
    spec = np.fft.fft2(blocks, axes=(1, 3))
    spec = (np.round(spec.real / step) + 1j * np.round(spec.imag / step)) * step
    blocks[:] = np.fft.ifft2(spec, axes=(1, 3)).real
    return out


def apply_signature(
    pixels: np.ndarray, sig: SignatureParams, rng: np.random.Generator
) -> np.ndarray:
    """Imprint a synthetic fingerprint on an H x W x 3 uint8 raster."""
    x = pixels.astype(np.float64) / 255.0
    h, w = x.shape[:2]
    if sig.noise_strength > 0:
        env = _radial_envelope(h, w, sig.band_center, sig.band_width)
        for c in range(x.shape[2]):
            white = rng.standard_normal((h, w))
            shaped = np.fft.ifft2(np.fft.fft2(white) * env).real
            scale = shaped.std()
            if scale > 0:
                x[:, :, c] += shaped / scale * sig.noise_strength
    if sig.quant_strength > 0:
        step = sig.quant_strength / 255.0
        for c in range(x.shape[2]):
            x[:, :, c] = _quantize_blocks(x[:, :, c], step)
    return np.clip(np.round(x * 255.0), 0, 255).astype(np.uint8)


def generate_synthetic_splice(
    spec: SpliceSpec, host: ImageRecord, donor: ImageRecord, seed: int
) -> tuple[ImageRecord, np.ndarray]:
    """Paste donor content carrying signature_b into a host carrying signature_a.

    Returns the composite image and the boolean ground-truth mask, which is
    true exactly on the region pixels. Bit-identical outputs for a fixed seed.
    """
    h, w = host.height, host.width
    if donor.height != h or donor.width != w:
        raise DataError(
            f"donor {donor.image_id} must match host dimensions {h}x{w}"
        )
    if not spec.region.inside(h, w):
        raise ValueError(f"splice region out of host bounds ({h}x{w})")
    if spec.signature_a == spec.signature_b:
        raise ValueError("signature_a and signature_b must differ in at least one parameter")
    rng = np.random.default_rng(seed)
    host_sig = apply_signature(host.pixels, spec.signature_a, rng)
    donor_sig = apply_signature(donor.pixels, spec.signature_b, rng)
    mask = spec.region.mask(h, w)
    composite = host_sig.copy()
    composite[mask] = donor_sig[mask]
    return ImageRecord(f"{spec.host_id}+{spec.donor_id}", composite), mask


def make_base_image(
    height: int, width: int, rng: np.random.Generator, cells: int = 8
) -> np.ndarray:
    """Smooth random RGB content: low-frequency noise plus soft gradients.

    Values stay within [20, 235] so signature noise survives the final
    uint8 rounding without clipping.
    """
    coarse = rng.uniform(0.0, 1.0, size=(cells, cells, 3))
    img = Image.fromarray((coarse * 255).astype(np.uint8), mode="RGB")
    smooth = np.asarray(
        img.resize((width, height), Image.BILINEAR), dtype=np.float64
    ) / 255.0
    gr = np.linspace(0, rng.uniform(-0.2, 0.2), height)[:, None, None]
    gc = np.linspace(0, rng.uniform(-0.2, 0.2), width)[None, :, None]
    field = np.clip(smooth + gr + gc, 0.0, 1.0)
    return (20 + field * 215).astype(np.uint8)
