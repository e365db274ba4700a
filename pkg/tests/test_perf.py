"""Timing plumbing: per-stage breakdowns and the similarity scaling fit."""

from __future__ import annotations

import numpy as np
import pytest

from spectrace.config import PipelineConfig, config_from_mapping
from spectrace.imagedata import ImageRecord
from spectrace.perf import (
    TimingBreakdown,
    benchmark_inference,
    fit_loglog_slope,
    similarity_scaling,
    time_similarity,
)
from spectrace.pipeline import STAGES


class TestTimingBreakdown:
    def test_total_and_rows(self):
        stage_seconds = {"embed": 0.4, "similarity": 0.1, "meanshift": 0.05, "upsample": 0.01}
        breakdown = TimingBreakdown(stage_seconds, patch_count=25, image_shape=(96, 96))
        assert breakdown.total == pytest.approx(0.56)
        rows = breakdown.csv_rows()
        assert rows[0] == "embed,25,0.4"
        assert [r.split(",")[0] for r in rows] == list(STAGES)

    def test_stage_set_enforced(self):
        with pytest.raises(ValueError):
            TimingBreakdown({"embed": 0.1}, 4, (32, 32))
        bad = {s: 0.1 for s in STAGES}
        bad["embed"] = -0.1
        with pytest.raises(ValueError):
            TimingBreakdown(bad, 4, (32, 32))


class TestBenchmarkInference:
    def test_small_image_breakdown(self, tiny_model):
        config = config_from_mapping(
            {
                "patch_size": [32, 32],
                "stride": 16,
                "encoder": {"backbone": "tiny4conv", "embedding_dim": 16},
            }
        )
        rng = np.random.default_rng(0)
        image = ImageRecord("bench", rng.integers(0, 256, size=(48, 48, 3), dtype=np.uint8))
        breakdown = benchmark_inference(tiny_model, image, config, repetitions=3)
        assert breakdown.patch_count == 4
        assert breakdown.image_shape == (48, 48)
        assert all(t >= 0 for t in breakdown.stage_seconds.values())
        assert breakdown.total == pytest.approx(sum(breakdown.stage_seconds.values()))

    def test_repetition_minimum(self, tiny_model):
        image = ImageRecord("x", np.zeros((48, 48, 3), dtype=np.uint8))
        with pytest.raises(ValueError):
            benchmark_inference(tiny_model, image, PipelineConfig(), repetitions=2)


class TestScalingFit:
    def test_exact_quadratic(self):
        times = {16: 16.0**2, 64: 64.0**2, 256: 256.0**2}
        assert fit_loglog_slope(times) == pytest.approx(2.0, abs=1e-12)

    def test_exact_linear_with_scale(self):
        times = {8: 3.0 * 8, 32: 3.0 * 32, 128: 3.0 * 128}
        assert fit_loglog_slope(times) == pytest.approx(1.0, abs=1e-12)

    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            fit_loglog_slope({16: 1.0})

    def test_time_similarity_returns_positive(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal((16, 32))
        seconds = time_similarity(z, (1, 16), min_time=0.01)
        assert 0.0 < seconds < 1.0

    def test_similarity_scaling_smoke(self):
        times = similarity_scaling(js=(8, 16), dim=16, seed=0)
        assert set(times) == {8, 16}
        assert all(t > 0 for t in times.values())
