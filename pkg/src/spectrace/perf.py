"""Performance characterization of the inference path.

The speed argument for this detector rests on the pairwise-similarity
stage being a single O(J^2 * D) matrix product rather than J^2 network
evaluations, so the checks here are structural: per-stage medians, and a
log-log scaling fit of similarity time against patch count.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .config import PipelineConfig
from .consistency import pairwise_consistency
from .encoder import ModelState
from .imagedata import ImageRecord
from .pipeline import STAGES, compute_response


@dataclass
class TimingBreakdown:
    stage_seconds: dict[str, float]
    patch_count: int
    image_shape: tuple[int, int]

    def __post_init__(self):
        if set(self.stage_seconds) != set(STAGES):
            raise ValueError(f"expected stages {STAGES}")
        if any(t < 0 for t in self.stage_seconds.values()):
            raise ValueError("stage times must be non-negative")

    @property
    def total(self) -> float:
        return sum(self.stage_seconds.values())

    def csv_rows(self) -> list[str]:
        return [
            f"{stage},{self.patch_count},{self.stage_seconds[stage]:.6g}"
            for stage in STAGES
        ]


def benchmark_inference(
    model: ModelState,
    image: ImageRecord,
    config: PipelineConfig,
    repetitions: int = 5,
) -> TimingBreakdown:
    """Median per-stage wall time over repeated full-image inference."""
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3 for a stable median")
    samples: list[dict[str, float]] = []
    patch_count = 0
    with threadpool_limits(limits=1):
        for _ in range(repetitions):
            response, timings = compute_response(model, image, config)
            samples.append(timings)
            patch_count = _grid_count(image, config)
    medians = {
        stage: float(np.median([s[stage] for s in samples])) for stage in STAGES
    }
    return TimingBreakdown(medians, patch_count, (image.height, image.width))


def _grid_count(image: ImageRecord, config: PipelineConfig) -> int:
    rows = (image.height - config.patch_size[0]) // config.stride + 1
    cols = (image.width - config.patch_size[1]) // config.stride + 1
    return rows * cols


def time_similarity(embeddings: np.ndarray, grid_shape: tuple[int, int], min_time: float = 0.05) -> float:
    """Per-call seconds for the pairwise-similarity stage, measured with
    enough inner repetitions that each sample exceeds min_time."""
    pairwise_consistency(embeddings, grid_shape)  # warm up
    start = time.perf_counter()
    pairwise_consistency(embeddings, grid_shape)
    once = max(time.perf_counter() - start, 1e-9)
    loops = max(1, int(np.ceil(min_time / once)))
    best = np.inf
    for _ in range(5):
        start = time.perf_counter()
        for _ in range(loops):
            pairwise_consistency(embeddings, grid_shape)
        best = min(best, (time.perf_counter() - start) / loops)
    return float(best)


def similarity_scaling(
    js: Sequence[int] = (16, 64, 256),
    dim: int = 256,
    seed: int = 0,
) -> dict[int, float]:
    """Similarity-stage seconds per call at several patch counts J.

    BLAS pools are pinned to one thread so the scaling fit is not flattened
    by small-J parallelization overheads.
    """
    rng = np.random.default_rng(seed)
    out: dict[int, float] = {}
    with threadpool_limits(limits=1):
        for j in js:
            z = rng.standard_normal((j, dim))
            out[j] = time_similarity(z, (1, j))
    return out


def fit_loglog_slope(times: Mapping[int, float]) -> float:
    """Least-squares slope of log(seconds) against log(J)."""
    if len(times) < 2:
        raise ValueError("need at least two sizes to fit a slope")
    x = np.log([float(j) for j in times])
    y = np.log([max(times[j], 1e-12) for j in times])
    return float(np.polyfit(x, y, 1)[0])
