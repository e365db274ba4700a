"""Shared fixtures and small test helpers."""

from __future__ import annotations

import numpy as np
import pytest
import torch
from torch import nn

from spectrace.consistency import ResponseMap
from spectrace.encoder import EncoderConfig, ModelState, build_encoder
from spectrace.imagedata import ImageRecord, Patch

torch.set_num_threads(1)


def random_patch(
    rng: np.random.Generator, size: tuple[int, int] = (16, 16), source: str = "img"
) -> Patch:
    pixels = rng.integers(0, 256, size=(size[0], size[1], 3), dtype=np.uint8)
    return Patch(source, 0, 0, pixels)


def random_image(
    rng: np.random.Generator, height: int = 96, width: int = 96, image_id: str = "img"
) -> ImageRecord:
    pixels = rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)
    return ImageRecord(image_id, pixels)


def random_response(
    rng: np.random.Generator, height: int = 12, width: int = 12, image_id: str = "r"
) -> ResponseMap:
    return ResponseMap(image_id, rng.uniform(0.0, 1.0, size=(height, width)))


class MicroNet(nn.Module):
    """Linear head over flattened half-spectrum features; small enough for
    finite-difference gradient checks."""

    def __init__(self, in_features: int, dim: int):
        super().__init__()
        self.proj = nn.Linear(in_features, dim)

    def forward(self, spectral=None, rgb=None):
        return self.proj(spectral.flatten(1))


def build_micro_model(patch_size: tuple[int, int] = (8, 8), dim: int = 12, seed: int = 0) -> ModelState:
    """A <10k-parameter rfft-input encoder wrapped like a regular model."""
    config = EncoderConfig(
        input_mode="rfft", backbone="tiny4conv", embedding_dim=dim, patch_size=patch_size
    )
    in_features = int(np.prod(config.spectral_shape))
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = MicroNet(in_features, dim)
    net.eval()
    return ModelState(config=config, net=net)


@pytest.fixture
def micro_model() -> ModelState:
    return build_micro_model()


@pytest.fixture(scope="session")
def tiny_model() -> ModelState:
    """Untrained tiny backbone over 32x32 patches; session-wide."""
    return build_encoder(
        EncoderConfig(backbone="tiny4conv", embedding_dim=16, patch_size=(32, 32)), seed=5
    )
