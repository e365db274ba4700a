"""Release gate: one test per shipped guarantee.

Each test is self-contained and named for the guarantee it locks down, so a
verbose run reads as a checklist. Oracles are imported from the per-module
suites rather than re-derived here.
"""

from __future__ import annotations

import dataclasses
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import build_micro_model
from test_consistency import reference_meanshift
from test_metrics import reference_ap
from test_spectral import cosine_sum_reference
from test_trainer import micro_batch, naive_pair_loss

import spectrace
from spectrace.cli import main
from spectrace.config import load_config, save_config
from spectrace.consistency import MeanShiftConfig, meanshift_mode
from spectrace.decision import (
    Thresholds,
    detect_pctarea,
    localize,
    maybe_invert,
    score_response,
)
from spectrace.encoder import embed_patches, load_model
from spectrace.errors import DataError
from spectrace.imagedata import (
    Patch,
    load_image,
    load_manifest,
    load_mask,
    sample_training_patches,
)
from spectrace.metrics import (
    BinaryMask,
    ConfusionCounts,
    average_precision,
    f1_iou,
    mcc,
)
from spectrace.pipeline import compute_response
from spectrace.spectral import rfft_features
from spectrace.trainer import contrastive_loss, gradient_check

PACKAGED_CONFIGS = Path(spectrace.__file__).parent / "configs"


def test_criterion_01_spectral_transform_matches_brute_force_sum():
    rng = np.random.default_rng(101)
    for size in (4, 8, 16):
        for _ in range(3):
            pixels = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
            features = rfft_features(Patch("p", 0, 0, pixels))
            reference = cosine_sum_reference(pixels)
            np.testing.assert_allclose(features.coefficients, reference, atol=1e-6)

    # A constant patch concentrates everything in the DC coefficient.
    constant = rfft_features(Patch("c", 0, 0, np.full((8, 8, 3), 100, dtype=np.uint8)))
    dc = 8 * 100 / 255.0
    for channel in range(3):
        assert constant.coefficients[channel, 0, 0] == pytest.approx(dc, abs=1e-5)
        rest = constant.coefficients[channel].copy()
        rest[0, 0] = 0.0
        assert np.abs(rest).max() < 1e-5


def test_criterion_02_loss_matches_hand_value_and_double_loop_oracle():
    z = torch.eye(2, dtype=torch.float64)
    loss, _ = contrastive_loss(z, z.clone(), temperature=1.0)
    assert float(loss) == pytest.approx(2.0 * -math.log(math.e / (math.e + 1.0)), abs=1e-6)

    rng = np.random.default_rng(102)
    for trial in range(100):
        b = int(rng.choice([2, 5, 16]))
        d = int(rng.integers(4, 24))
        tau = float(rng.uniform(0.3, 2.5))
        zf, zs = rng.normal(size=(b, d)), rng.normal(size=(b, d))
        loss, _ = contrastive_loss(torch.as_tensor(zf), torch.as_tensor(zs), tau)
        ref, _ = naive_pair_loss(zf, zs, tau)
        assert float(loss) == pytest.approx(ref, abs=1e-6)


def test_criterion_03_analytic_gradients_match_finite_differences():
    model = build_micro_model()  # ~1.6k parameters, well under 10k
    assert sum(p.numel() for p in model.net.parameters()) <= 10_000
    batch = micro_batch(4, seed=103)
    for temperature in (0.9, 2.0):
        max_rel = gradient_check(
            model, batch, temperature=temperature, epsilon=1e-4, num_coords=60
        )
        assert max_rel < 1e-3, f"tau={temperature}: max relative error {max_rel}"


def test_criterion_04_match_probability_invariants():
    rng = np.random.default_rng(104)
    for _ in range(200):
        b = int(rng.integers(2, 10))
        d = int(rng.integers(2, 16))
        tau = float(rng.uniform(0.3, 2.5))
        zf, zs = rng.normal(size=(b, d)), rng.normal(size=(b, d))
        loss, phi = contrastive_loss(torch.as_tensor(zf), torch.as_tensor(zs), tau)
        np.testing.assert_allclose(phi.sum(dim=1).numpy(), 1.0, atol=1e-6)

        scale = float(rng.uniform(0.1, 10.0))
        loss_scaled, _ = contrastive_loss(
            torch.as_tensor(scale * zf), torch.as_tensor(scale * zs), tau
        )
        assert float(loss_scaled) == pytest.approx(float(loss), abs=1e-6)

        perm = rng.permutation(b)
        loss_perm, phi_perm = contrastive_loss(
            torch.as_tensor(zf[perm]), torch.as_tensor(zs[perm]), tau
        )
        assert float(loss_perm) == pytest.approx(float(loss), abs=1e-6)
        np.testing.assert_allclose(
            phi_perm.numpy(), phi.numpy()[np.ix_(perm, perm)], atol=1e-6
        )


def test_criterion_05_meanshift_matches_direct_iteration_and_stays_bounded():
    config = MeanShiftConfig()
    fixtures = [
        np.array([[0.0], [0.1], [-0.1]]),
        np.array([[0.0], [0.1], [-0.1], [5.0]]),
        np.array([[1.0, 1.0], [1.0, 0.9], [-1.0, -1.0]]),
        np.block(
            [
                [np.ones((4, 4)), np.zeros((4, 2))],
                [np.zeros((2, 4)), np.ones((2, 2))],
            ]
        ),
    ]
    for points in fixtures:
        mode = meanshift_mode(points, config)
        ref = reference_meanshift(points)
        np.testing.assert_allclose(mode, ref, atol=0.05)

    rng = np.random.default_rng(105)
    for _ in range(500):
        n, d = int(rng.integers(1, 12)), int(rng.integers(1, 6))
        points = rng.normal(scale=rng.uniform(0.05, 8.0), size=(n, d))
        mode = meanshift_mode(points, config)
        assert (mode >= points.min(axis=0) - 1e-9).all()
        assert (mode <= points.max(axis=0) + 1e-9).all()


def test_criterion_06_decision_rule_properties():
    from spectrace.consistency import ResponseMap

    rng = np.random.default_rng(106)
    for _ in range(200):
        h, w = int(rng.integers(1, 12)), int(rng.integers(1, 12))
        response = ResponseMap("r", rng.uniform(0.0, 1.0, size=(h, w)))

        oriented, _ = maybe_invert(response)
        again, flipped = maybe_invert(oriented)
        assert not flipped
        np.testing.assert_array_equal(again.values, oriented.values)

        lo, hi = sorted(rng.uniform(0.0, 1.0, size=2))
        assert detect_pctarea(response, float(lo)).score >= detect_pctarea(response, float(hi)).score
        loose = localize(response, float(lo)).values
        tight = localize(response, float(hi)).values
        assert (tight <= loose).all()  # masks nest as the threshold grows

        # Exact agreement with pixel-by-pixel counting.
        delta = float(rng.uniform(0.0, 1.0))
        count = sum(1 for v in response.values.ravel() if v > delta)
        assert detect_pctarea(response, delta).score == count / (h * w)
        mask = localize(response, delta).values
        assert mask.sum() == sum(1 for v in oriented.values.ravel() if v > delta)


def test_criterion_07_metric_oracles():
    assert average_precision([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]) == pytest.approx(
        5.0 / 6.0, abs=1e-9
    )

    rng = np.random.default_rng(107)
    for trial in range(100):
        n = int(rng.integers(2, 40))
        labels = rng.integers(0, 2, size=n)
        if labels.sum() == 0:
            labels[0] = 1
        scores = rng.uniform(size=n)
        if trial % 3 == 0:
            scores = np.round(scores, 1)
        assert average_precision(scores, labels) == pytest.approx(
            reference_ap(scores, labels), abs=1e-9
        )

    assert mcc(ConfusionCounts(tp=3, tn=4, fp=1, fn=2)) == pytest.approx(
        10.0 / math.sqrt(600.0), abs=1e-9
    )

    for _ in range(500):
        h, w = int(rng.integers(1, 10)), int(rng.integers(1, 10))
        pred = BinaryMask("p", rng.random((h, w)) < rng.uniform(0, 1))
        gt = BinaryMask("g", rng.random((h, w)) < rng.uniform(0, 1))
        f1, iou, _ = f1_iou(pred, gt)
        assert iou <= f1 + 1e-12


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """Generate the packaged desk corpus and train its model, timing the
    training stage."""
    base = tmp_path_factory.mktemp("desk")
    config = load_config(PACKAGED_CONFIGS / "desk.yaml")
    config = dataclasses.replace(
        config,
        paths=dataclasses.replace(
            config.paths,
            model=str(base / "model.sisl"),
            train_manifest=str(base / "train" / "manifest.csv"),
            eval_manifest=str(base / "test" / "manifest.csv"),
            out_dir=str(base),
        ),
    )
    config_path = base / "desk_run.yaml"
    save_config(config, config_path)

    assert main(["synth", "--config", str(config_path)]) == 0
    started = time.perf_counter()
    assert main(["train", "--config", str(config_path)]) == 0
    elapsed = time.perf_counter() - started
    return {"base": base, "config": config, "train_seconds": elapsed}


def test_criterion_08_desk_scale_end_to_end(desk_run):
    base = desk_run["base"]
    config = desk_run["config"]

    # Corpus shape: 40 training images, 10 authentic + 10 spliced test images.
    train_manifest = load_manifest(base / "train" / "manifest.csv")
    test_manifest = load_manifest(base / "test" / "manifest.csv")
    assert len(train_manifest) == 40
    labels = [e.label for e in test_manifest.entries]
    assert labels.count("authentic") == 10 and labels.count("spliced") == 10

    # Training budget: 2000 steps, B=16, tau=0.9, within the wall-time cap.
    assert config.train.total_steps == 2000
    assert config.train.batch_pairs == 16
    assert config.train.temperature == pytest.approx(0.9)
    assert desk_run["train_seconds"] <= 15 * 60

    model = load_model(base / "model.sisl")
    assert model.training_steps == 2000

    # (a) Held-out pair separation: embeddings of two patches from the same
    # unseen image are closer than embeddings from different unseen images.
    held_out = [e for e in test_manifest.entries if e.label == "authentic"]
    firsts, seconds = [], []
    for i, entry in enumerate(held_out):
        image = load_image(entry.path, entry.image_id)
        pair = sample_training_patches(
            image, 2, config.patch_size, np.random.SeedSequence([108, i])
        )
        firsts.append(pair[0])
        seconds.append(pair[1])
    zf = np.stack([e.values for e in embed_patches(model, firsts, config.normalization)])
    zs = np.stack([e.values for e in embed_patches(model, seconds, config.normalization)])
    zf /= np.linalg.norm(zf, axis=1, keepdims=True)
    zs /= np.linalg.norm(zs, axis=1, keepdims=True)
    sim = zf @ zs.T
    n = sim.shape[0]
    intra = float(np.trace(sim) / n)
    inter = float((sim.sum() - np.trace(sim)) / (n * n - n))
    assert intra - inter >= 0.2, f"held-out margin {intra - inter:.3f}"

    # (b, c) Detection AP and best-grid localization IoU over the test set.
    responses = {}
    for entry in test_manifest.entries:
        image = load_image(entry.path, entry.image_id)
        responses[entry.image_id], _ = compute_response(model, image, config)

    scores, labels_01 = [], []
    for entry in sorted(test_manifest.entries, key=lambda e: e.image_id):
        result = score_response(responses[entry.image_id], config.detection_method, config.thresholds)
        scores.append(result.score)
        labels_01.append(1 if entry.label == "spliced" else 0)
    ap = average_precision(scores, labels_01)
    assert ap >= 0.9, f"detection AP {ap:.3f}"

    spliced = [e for e in test_manifest.entries if e.label == "spliced"]
    best_iou = -1.0
    for delta_l in np.arange(0.05, 0.951, 0.05):
        ious = []
        for entry in spliced:
            pred = localize(responses[entry.image_id], float(delta_l))
            gt = load_mask(entry.mask_path, expect_shape=responses[entry.image_id].shape)
            _, iou, _ = f1_iou(pred, BinaryMask(entry.image_id, gt))
            ious.append(iou)
        best_iou = max(best_iou, float(np.mean(ious)))
    assert best_iou >= 0.5, f"best mean IoU over the threshold grid is {best_iou:.3f}"


def test_criterion_09_reference_config_carries_published_settings(tmp_path):
    config = load_config(PACKAGED_CONFIGS / "reference.yaml")
    echo_path = tmp_path / "echo.yaml"
    save_config(config, echo_path)
    echoed = load_config(echo_path)
    assert echoed == config

    assert echoed.patch_size == (128, 128)
    assert echoed.stride == 64
    assert echoed.train.batch_pairs == 256
    assert echoed.train.temperature == pytest.approx(0.9)
    assert echoed.train.peak_lr == pytest.approx(1e-3)
    assert echoed.train.final_lr == pytest.approx(1e-5)
    assert echoed.encoder.embedding_dim == 256
    assert echoed.encoder.backbone == "resnet18_like"
    assert echoed.train.adam_beta1 == pytest.approx(0.9)
    assert echoed.train.adam_beta2 == pytest.approx(0.99)


def test_criterion_10_similarity_stage_scales_quadratically():
    from spectrace.perf import fit_loglog_slope, similarity_scaling

    times = similarity_scaling(js=(16, 64, 256), dim=256, seed=110)
    slope = fit_loglog_slope(times)
    assert 1.5 <= slope <= 2.5, f"log-log slope {slope:.2f}, times {times}"
    assert times[64] < 1.0, f"J=64 similarity took {times[64]:.3f}s"
