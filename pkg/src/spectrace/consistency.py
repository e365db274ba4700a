"""Patch-consistency analysis for a single image.

Embeddings of the J grid patches are compared pairwise by cosine to form a
J x J consistency matrix. The dominant mode of the matrix rows (found by
meanshift with a Gaussian kernel) describes how a typical patch relates to
every other patch; the per-patch response is the rescaled disagreement with
that mode, upsampled bilinearly from patch-grid geometry to pixel geometry.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, FormatError

KERNELS = ("gaussian",)
AGGREGATORS = ("meanshift", "simple_mean")

_RESP_MAGIC = b"SISLRESP"


@dataclass(frozen=True)
class MeanShiftConfig:
    kernel: str = "gaussian"
    bandwidth: float | str = "auto"
    tolerance: float = 1e-5
    max_iterations: int = 100

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}, expected one of {KERNELS}")
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "auto":
                raise ValueError("bandwidth must be a positive number or 'auto'")
        elif self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class ConsistencyMatrix:
    """Symmetric J x J cosine matrix with unit diagonal, plus grid shape."""

    values: np.ndarray
    grid_shape: tuple[int, int]

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("consistency matrix must be square")
        if v.shape[0] != self.grid_shape[0] * self.grid_shape[1]:
            raise ValueError(
                f"matrix size {v.shape[0]} does not match grid {self.grid_shape}"
            )

    @property
    def size(self) -> int:
        return self.values.shape[0]


def pairwise_consistency(
    embeddings: np.ndarray, grid_shape: tuple[int, int]
) -> ConsistencyMatrix:
    """Cosine similarity between every pair of the J row embeddings.

    The result is exactly symmetric with an exactly-unit diagonal, clipped
    to [-1, 1].
    """
    z = np.asarray(embeddings, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError(f"expected (J, D) embeddings, got shape {z.shape}")
    if z.shape[0] < 2:
        raise DataError("need at least 2 patch embeddings for consistency analysis")
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if (norms == 0).any():
        raise DataError("zero-norm embedding in consistency input")
    unit = z / norms
    # einsum keeps a fixed summation order regardless of BLAS backend or
    # thread count, so matrices are byte-reproducible across machines; J is
    # small enough that skipping BLAS costs nothing next to the embed stage.
    m = np.einsum("ik,jk->ij", unit, unit)
    m = 0.5 * (m + m.T)  # exact symmetry despite float summation order
    np.fill_diagonal(m, 1.0)
    np.clip(m, -1.0, 1.0, out=m)
    return ConsistencyMatrix(m, grid_shape)


# ---------------------------------------------------------------------------
# Meanshift
# ---------------------------------------------------------------------------


def _auto_bandwidth(points: np.ndarray) -> float:
    """Median pairwise Euclidean distance, floored at 1e-3."""
    n = points.shape[0]
    if n < 2:
        return 1e-3
    diffs = points[:, None, :] - points[None, :, :]
    dists = np.sqrt((diffs**2).sum(axis=2))
    iu = np.triu_indices(n, k=1)
    return max(float(np.median(dists[iu])), 1e-3)


def meanshift_mode(points: np.ndarray, config: MeanShiftConfig) -> np.ndarray:
    """Gaussian-kernel meanshift mode of a point set.

    The iteration starts from the point of highest kernel density estimate
    (lowest index on ties) and stops when the shift drops below tolerance
    or after max_iterations.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise ValueError(f"expected a non-empty (N, D) point set, got shape {pts.shape}")
    if not np.isfinite(pts).all():
        raise ValueError("non-finite values in meanshift input")
    if pts.shape[0] == 1:
        return pts[0].copy()

    h = _auto_bandwidth(pts) if config.bandwidth == "auto" else float(config.bandwidth)

    def weights(center: np.ndarray) -> np.ndarray:
        d2 = ((pts - center) ** 2).sum(axis=1)
        return np.exp(-0.5 * d2 / (h * h))

    density = np.array([weights(p).sum() for p in pts])
    mode = pts[int(np.argmax(density))].copy()  # argmax takes the first max
    for _ in range(config.max_iterations):
        w = weights(mode)
        new_mode = (w[:, None] * pts).sum(axis=0) / w.sum()
        shift = float(np.linalg.norm(new_mode - mode))
        mode = new_mode
        if shift < config.tolerance:
            break
    return mode


def aggregate_response(
    matrix: ConsistencyMatrix,
    config: MeanShiftConfig | None = None,
    method: str = "meanshift",
) -> np.ndarray:
    """Per-patch response field on the grid: 1 - rescaled mode similarity.

    With method="meanshift" the mode of the J matrix rows is found by
    meanshift; "simple_mean" uses the row mean instead. Either way the
    mode vector's entries are mapped from [-1, 1] to [0, 1] and inverted,
    so patches that disagree with the dominant behavior score high.
    """
    if method not in AGGREGATORS:
        raise ValueError(f"unknown aggregator {method!r}, expected one of {AGGREGATORS}")
    if method == "meanshift":
        mode = meanshift_mode(matrix.values, config or MeanShiftConfig())
    else:
        mode = matrix.values.mean(axis=0)
    response = 1.0 - np.clip((mode + 1.0) / 2.0, 0.0, 1.0)
    return response.reshape(matrix.grid_shape)


# ---------------------------------------------------------------------------
# Upsampling to pixel geometry
# ---------------------------------------------------------------------------


def upsample_response(
    field: np.ndarray,
    image_shape: tuple[int, int],
    patch_size: tuple[int, int],
    stride: int,
    image_id: str = "",
) -> ResponseMap:
    """Bilinearly interpolate a grid response to per-pixel resolution.

    Grid node (i, j) sits at the center of its source patch,
    (i * stride + (U - 1) / 2, j * stride + (V - 1) / 2). Pixels outside
    the convex hull of the nodes clamp to the nearest node value.
    """
    f = np.asarray(field, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError("response field must be 2-D")
    height, width = image_shape
    patch_h, patch_w = patch_size
    rows, cols = f.shape
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if (rows - 1) * stride + patch_h > height or (cols - 1) * stride + patch_w > width:
        raise ValueError(
            f"grid {f.shape} with patch {patch_size} stride {stride} "
            f"does not fit in image {image_shape}"
        )

    centers_r = np.arange(rows) * stride + (patch_h - 1) / 2.0
    centers_c = np.arange(cols) * stride + (patch_w - 1) / 2.0

    def axis_coords(n_pix: int, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        # For each pixel: fractional grid coordinate, clamped to [0, n-1].
        pix = np.arange(n_pix, dtype=np.float64)
        if len(centers) == 1:
            return np.zeros(n_pix, dtype=np.intp), np.zeros(n_pix)
        t = (pix - centers[0]) / float(stride)
        t = np.clip(t, 0.0, len(centers) - 1.0)
        lo = np.minimum(t.astype(np.intp), len(centers) - 2)
        return lo, t - lo

    lo_r, fr_r = axis_coords(height, centers_r)
    lo_c, fr_c = axis_coords(width, centers_c)
    top = f[lo_r][:, lo_c] * (1 - fr_c)[None, :] + f[lo_r][:, np.minimum(lo_c + 1, cols - 1)] * fr_c[None, :]
    bot = (
        f[np.minimum(lo_r + 1, rows - 1)][:, lo_c] * (1 - fr_c)[None, :]
        + f[np.minimum(lo_r + 1, rows - 1)][:, np.minimum(lo_c + 1, cols - 1)] * fr_c[None, :]
    )
    values = top * (1 - fr_r)[:, None] + bot * fr_r[:, None]
    # convex combinations of in-range values; clip guards float round-off only
    return ResponseMap(image_id, np.clip(values, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Response maps
# ---------------------------------------------------------------------------


@dataclass
class ResponseMap:
    """Per-pixel anomaly response in [0, 1] for one image."""

    image_id: str
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("response map must be 2-D")
        if not np.isfinite(v).all():
            raise ValueError("non-finite values in response map")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("response values must lie in [0, 1]")
        self.values = v

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]


def save_response_png(response: ResponseMap, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    gray = np.rint(response.values * 255.0).astype(np.uint8)
    Image.fromarray(gray, mode="L").save(path)


def save_response_raw(response: ResponseMap, path: Path | str) -> None:
    h, w = response.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_RESP_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(response.values.astype("<f4").tobytes())


def load_response_raw(path: Path | str, image_id: str = "") -> ResponseMap:
    blob = Path(path).read_bytes()
    if blob[:8] != _RESP_MAGIC:
        raise FormatError(f"{path}: not a response file (bad magic)")
    if len(blob) < 16:
        raise FormatError(f"{path}: truncated response header")
    h, w = struct.unpack("<II", blob[8:16])
    expected = 16 + 4 * h * w
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {h}x{w}, got {len(blob)}")
    values = np.frombuffer(blob, dtype="<f4", offset=16).reshape(h, w).astype(np.float64)
    return ResponseMap(image_id or Path(path).stem, values)
