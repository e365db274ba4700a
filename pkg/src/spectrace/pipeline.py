"""End-to-end inference for one image: patches -> embeddings ->
consistency matrix -> meanshift aggregation -> pixelwise response map."""

from __future__ import annotations

import time

import numpy as np

from .config import PipelineConfig
from .consistency import (
    ResponseMap,
    aggregate_response,
    pairwise_consistency,
    upsample_response,
)
from .encoder import ModelState, embed_patches
from .errors import DataError
from .imagedata import ImageRecord, extract_grid_patches

STAGES = ("embed", "similarity", "meanshift", "upsample")


def compute_response(
    model: ModelState, image: ImageRecord, config: PipelineConfig
) -> tuple[ResponseMap, dict[str, float]]:
    """Response map for one image plus per-stage wall times in seconds.

    The timing dict keys are STAGES; "embed" covers patch extraction and
    the forward pass, "similarity" the J x J cosine matrix, "meanshift"
    the mode aggregation, "upsample" the bilinear blow-up.
    """
    grid = extract_grid_patches(image, config.patch_size, config.stride)
    if grid.count < 2:
        raise DataError(
            f"image {image.image_id!r} ({image.height}x{image.width}) yields "
            f"{grid.count} patch(es) at {config.patch_size[0]}x{config.patch_size[1]} "
            f"stride {config.stride}; consistency needs at least 2 — use a larger image"
        )

    t0 = time.perf_counter()
    embeddings = embed_patches(model, grid.patches, config.normalization)
    z = np.stack([e.values for e in embeddings])
    t1 = time.perf_counter()
    matrix = pairwise_consistency(z, grid.shape)
    t2 = time.perf_counter()
    field = aggregate_response(matrix, config.meanshift, config.aggregator)
    t3 = time.perf_counter()
    response = upsample_response(
        field, (image.height, image.width), config.patch_size, config.stride, image.image_id
    )
    t4 = time.perf_counter()

    timings = {
        "embed": t1 - t0,
        "similarity": t2 - t1,
        "meanshift": t3 - t2,
        "upsample": t4 - t3,
    }
    return response, timings
