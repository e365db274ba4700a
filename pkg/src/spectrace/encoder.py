"""The signature network: a residual convolutional backbone with global
average pooling followed by a single affine projector producing D-dim patch
embeddings, plus the binary model file format.

Input modes: "rfft" consumes spectral features (C x U x V//2+1), "rgb"
consumes raw pixels scaled to [0, 1], and "fusion" runs two independent
backbones whose pooled features are concatenated before the one projector.
Embeddings are not L2-normalized here; normalization happens inside cosine
similarity.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, FormatError, NumericalError
from .imagedata import Patch, PatchRef
from .spectral import SpectralFeature, normalize_spectrum, rfft_features

INPUT_MODES = ("rfft", "rgb", "fusion")
BACKBONES = ("resnet18_like", "resnet50_like", "tiny4conv")

FORMAT_VERSION = 1
_MAGIC = b"SISLMODL"


@dataclass(frozen=True)
class EncoderConfig:
    input_mode: str = "rfft"
    backbone: str = "resnet18_like"
    embedding_dim: int = 256
    patch_size: tuple[int, int] = (128, 128)

    def __post_init__(self):
        if self.input_mode not in INPUT_MODES:
            raise ConfigError(f"input_mode must be one of {INPUT_MODES}, got {self.input_mode!r}")
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.embedding_dim < 2:
            raise ConfigError(f"embedding_dim must be >= 2, got {self.embedding_dim}")
        u, v = self.patch_size
        if u < 1 or v < 1:
            raise ConfigError(f"patch_size must be positive, got {self.patch_size}")

    @property
    def input_channels(self) -> int:
        # the spectral transform is per-channel, so both branches see 3 channels
        return 3

    @property
    def spectral_shape(self) -> tuple[int, int, int]:
        u, v = self.patch_size
        return (3, u, v // 2 + 1)

    @property
    def rgb_shape(self) -> tuple[int, int, int]:
        u, v = self.patch_size
        return (3, u, v)


@dataclass
class Embedding:
    """D-dimensional representation of one patch."""

    values: np.ndarray
    source: PatchRef


@dataclass
class ModelState:
    config: EncoderConfig
    net: nn.Module
    training_steps: int = 0
    format_version: int = FORMAT_VERSION


def _conv_out(n: int, kernel: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - kernel) // stride + 1


def _post_stem_size(backbone: str, spatial: tuple[int, int]) -> tuple[int, int]:
    h, w = spatial
    if backbone == "tiny4conv":
        return _conv_out(h, 3, 2, 1), _conv_out(w, 3, 2, 1)
    h, w = _conv_out(h, 7, 2, 3), _conv_out(w, 7, 2, 3)
    return _conv_out(h, 3, 2, 1), _conv_out(w, 3, 2, 1)


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_ch: int, planes: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, planes, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = None
        if stride != 1 or in_ch != planes:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, planes, 1, stride=stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, in_ch: int, planes: int, stride: int = 1):
        super().__init__()
        out_ch = planes * self.expansion
        self.conv1 = nn.Conv2d(in_ch, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv3 = nn.Conv2d(planes, out_ch, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


class ResidualBackbone(nn.Module):
    """Standard residual stack: 7x7 stem, four stages, global average pool.

    The stem accepts the configured channel count and non-square spatial
    input; global pooling makes the head shape-agnostic.
    """

    def __init__(self, block, layers: tuple[int, int, int, int], in_channels: int):
        super().__init__()
        self.inplanes = 64
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(64),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        self.layer1 = self._make_layer(block, 64, layers[0], stride=1)
        self.layer2 = self._make_layer(block, 128, layers[1], stride=2)
        self.layer3 = self._make_layer(block, 256, layers[2], stride=2)
        self.layer4 = self._make_layer(block, 512, layers[3], stride=2)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.feature_dim = 512 * block.expansion

    def _make_layer(self, block, planes: int, count: int, stride: int) -> nn.Sequential:
        blocks = [block(self.inplanes, planes, stride)]
        self.inplanes = planes * block.expansion
        blocks += [block(self.inplanes, planes) for _ in range(count - 1)]
        return nn.Sequential(*blocks)

    def forward(self, x):
        x = self.stem(x)
        x = self.layer4(self.layer3(self.layer2(self.layer1(x))))
        return torch.flatten(self.pool(x), 1)


class Tiny4ConvBackbone(nn.Module):
    """Four stride-2 conv blocks and a global pool; a fast desk-scale fixture
    backbone, never the default."""

    def __init__(self, in_channels: int, channels=(16, 32, 64, 64)):
        super().__init__()
        layers = []
        prev = in_channels
        for ch in channels:
            layers += [
                nn.Conv2d(prev, ch, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(ch),
                nn.ReLU(inplace=True),
            ]
            prev = ch
        self.blocks = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.feature_dim = channels[-1]

    def forward(self, x):
        return torch.flatten(self.pool(self.blocks(x)), 1)


def _make_backbone(name: str, in_channels: int) -> nn.Module:
    if name == "resnet18_like":
        return ResidualBackbone(BasicBlock, (2, 2, 2, 2), in_channels)
    if name == "resnet50_like":
        return ResidualBackbone(Bottleneck, (3, 4, 6, 3), in_channels)
    return Tiny4ConvBackbone(in_channels)


class SignatureNet(nn.Module):
    """Backbone(s) plus a single affine projector to the embedding space."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.input_mode = config.input_mode
        feature_dim = 0
        if config.input_mode in ("rfft", "fusion"):
            self.spectral_backbone = _make_backbone(config.backbone, config.input_channels)
            feature_dim += self.spectral_backbone.feature_dim
        if config.input_mode in ("rgb", "fusion"):
            self.rgb_backbone = _make_backbone(config.backbone, config.input_channels)
            feature_dim += self.rgb_backbone.feature_dim
        self.projector = nn.Linear(feature_dim, config.embedding_dim)

    def forward(self, spectral: torch.Tensor | None = None, rgb: torch.Tensor | None = None):
        parts = []
        if self.input_mode in ("rfft", "fusion"):
            if spectral is None:
                raise ValueError(f"{self.input_mode} mode requires a spectral input")
            parts.append(self.spectral_backbone(spectral))
        if self.input_mode in ("rgb", "fusion"):
            if rgb is None:
                raise ValueError(f"{self.input_mode} mode requires an rgb input")
            parts.append(self.rgb_backbone(rgb))
        feats = parts[0] if len(parts) == 1 else torch.cat(parts, dim=1)
        return self.projector(feats)


def _check_spatial(config: EncoderConfig) -> None:
    spatials = []
    if config.input_mode in ("rfft", "fusion"):
        spatials.append(config.spectral_shape[1:])
    if config.input_mode in ("rgb", "fusion"):
        spatials.append(config.rgb_shape[1:])
    for spatial in spatials:
        h, w = _post_stem_size(config.backbone, spatial)
        if h < 8 or w < 8:
            raise ConfigError(
                f"input spatial {spatial} too small for {config.backbone}: "
                f"post-stem size {(h, w)} must be >= 8 in each axis"
            )


def build_encoder(config: EncoderConfig, seed: int) -> ModelState:
    """Construct a freshly initialized model; deterministic given the seed."""
    _check_spatial(config)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = SignatureNet(config)
    net.eval()
    return ModelState(config, net, training_steps=0)


def parameter_count(model: ModelState) -> int:
    return sum(p.numel() for p in model.net.parameters())


# ---------------------------------------------------------------------------
# Input tensorization and embedding
# ---------------------------------------------------------------------------


def spectral_tensor(features: list[SpectralFeature]) -> torch.Tensor:
    arr = np.stack([f.coefficients for f in features]).astype(np.float32)
    return torch.from_numpy(arr)


def rgb_tensor(patches: list[Patch]) -> torch.Tensor:
    arr = np.stack([p.pixels for p in patches]).astype(np.float32) / 255.0
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def prepare_inputs(
    config: EncoderConfig, patches: list[Patch], normalization: str = "none"
) -> dict[str, torch.Tensor]:
    """Compute whatever tensors the configured input mode needs from patches."""
    inputs: dict[str, torch.Tensor] = {}
    if config.input_mode in ("rfft", "fusion"):
        feats = [normalize_spectrum(rfft_features(p), normalization) for p in patches]
        inputs["spectral"] = spectral_tensor(feats)
    if config.input_mode in ("rgb", "fusion"):
        inputs["rgb"] = rgb_tensor(patches)
    return inputs


def _validate_shapes(config: EncoderConfig, inputs: dict[str, torch.Tensor]) -> None:
    if config.input_mode in ("rfft", "fusion"):
        if "spectral" not in inputs:
            raise ValueError(f"{config.input_mode} mode requires a spectral input")
        got = tuple(inputs["spectral"].shape[1:])
        if got != config.spectral_shape:
            raise ValueError(f"spectral input shape {got} does not match config {config.spectral_shape}")
    if config.input_mode in ("rgb", "fusion"):
        if "rgb" not in inputs:
            raise ValueError(f"{config.input_mode} mode requires an rgb input")
        got = tuple(inputs["rgb"].shape[1:])
        if got != config.rgb_shape:
            raise ValueError(f"rgb input shape {got} does not match config {config.rgb_shape}")


def _forward_eval(model: ModelState, inputs: dict[str, torch.Tensor]) -> np.ndarray:
    model.net.eval()
    with torch.no_grad():
        z = model.net(**inputs)
    out = z.numpy()
    if not np.isfinite(out).all():
        raise NumericalError("non-finite embedding values")
    return out


def embed_batch(
    model: ModelState,
    spectral: list[SpectralFeature] | None = None,
    patches: list[Patch] | None = None,
) -> list[Embedding]:
    """Embed a batch of inputs in evaluation mode (pure given the weights).

    Fusion mode requires both the spectral features and the pixel patches of
    the same crops, in the same order.
    """
    mode = model.config.input_mode
    inputs: dict[str, torch.Tensor] = {}
    refs: list[PatchRef] = []
    if mode in ("rfft", "fusion"):
        if not spectral:
            raise ValueError(f"{mode} mode requires spectral features")
        inputs["spectral"] = spectral_tensor(spectral)
        refs = [f.source for f in spectral]
    if mode in ("rgb", "fusion"):
        if not patches:
            raise ValueError(f"{mode} mode requires pixel patches")
        inputs["rgb"] = rgb_tensor(patches)
        if mode == "fusion":
            pixel_refs = [p.ref for p in patches]
            if pixel_refs != refs:
                raise ValueError("fusion inputs must pair spectral and pixel data of the same patches")
        else:
            refs = [p.ref for p in patches]
    _validate_shapes(model.config, inputs)
    z = _forward_eval(model, inputs)
    return [Embedding(z[i].copy(), refs[i]) for i in range(len(refs))]


def embed(
    model: ModelState,
    spectral: SpectralFeature | None = None,
    patch: Patch | None = None,
) -> Embedding:
    """Embed a single input; see embed_batch."""
    return embed_batch(
        model,
        spectral=[spectral] if spectral is not None else None,
        patches=[patch] if patch is not None else None,
    )[0]


def embed_patches(
    model: ModelState,
    patches: list[Patch],
    normalization: str = "none",
    chunk_size: int = 64,
) -> list[Embedding]:
    """Embed raw patches, computing spectral features as the mode requires."""
    out: list[Embedding] = []
    for start in range(0, len(patches), chunk_size):
        chunk = patches[start : start + chunk_size]
        inputs = prepare_inputs(model.config, chunk, normalization)
        _validate_shapes(model.config, inputs)
        z = _forward_eval(model, inputs)
        out += [Embedding(z[i].copy(), p.ref) for i, p in enumerate(chunk)]
    return out


# ---------------------------------------------------------------------------
# Model serialization
# ---------------------------------------------------------------------------


def _config_meta(model: ModelState) -> bytes:
    meta = {
        "config": {
            "input_mode": model.config.input_mode,
            "backbone": model.config.backbone,
            "embedding_dim": model.config.embedding_dim,
            "patch_size": list(model.config.patch_size),
        },
        "training_steps": model.training_steps,
    }
    return json.dumps(meta, sort_keys=True).encode()


def save_model(model: ModelState, path: Path | str) -> None:
    """Write the model file: magic, format version, canonical config block,
    key-sorted named weight arrays as little-endian float32, and a trailing
    64-bit checksum of the payload."""
    payload = io.BytesIO()
    payload.write(struct.pack("<I", model.format_version))
    meta = _config_meta(model)
    payload.write(struct.pack("<I", len(meta)))
    payload.write(meta)
    state = model.net.state_dict()
    names = sorted(state.keys())
    payload.write(struct.pack("<I", len(names)))
    for name in names:
        arr = state[name].detach().cpu().numpy().astype("<f4")
        encoded = name.encode()
        payload.write(struct.pack("<I", len(encoded)))
        payload.write(encoded)
        payload.write(struct.pack("<I", arr.ndim))
        payload.write(struct.pack(f"<{max(arr.ndim, 1)}I", *(arr.shape or (0,))))
        payload.write(arr.tobytes())
    body = payload.getvalue()
    digest = hashlib.blake2b(body, digest_size=8).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(body)
        fh.write(digest)


def load_model(path: Path | str) -> ModelState:
    """Read a model file back; weights round-trip bit-exactly."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 8 + 4 + 8 or data[:8] != _MAGIC:
        raise FormatError(f"not a model file: {path}")
    body, digest = data[8:-8], data[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != digest:
        raise FormatError(f"model file checksum failure: {path}")
    buf = io.BytesIO(body)

    def _u32() -> int:
        return struct.unpack("<I", buf.read(4))[0]

    version = _u32()
    if version > FORMAT_VERSION:
        raise FormatError(
            f"model file format_version {version} is newer than supported version {FORMAT_VERSION}: {path}"
        )
    meta = json.loads(buf.read(_u32()).decode())
    cfg = meta["config"]
    config = EncoderConfig(
        input_mode=cfg["input_mode"],
        backbone=cfg["backbone"],
        embedding_dim=cfg["embedding_dim"],
        patch_size=tuple(cfg["patch_size"]),
    )
    arrays: dict[str, np.ndarray] = {}
    for _ in range(_u32()):
        name = buf.read(_u32()).decode()
        ndim = _u32()
        shape = struct.unpack(f"<{max(ndim, 1)}I", buf.read(4 * max(ndim, 1)))
        if ndim == 0:
            shape = ()
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(buf.read(4 * count), dtype="<f4").reshape(shape)

    with torch.random.fork_rng():
        torch.manual_seed(0)
        net = SignatureNet(config)
    template = net.state_dict()
    if sorted(template.keys()) != sorted(arrays.keys()):
        raise FormatError(f"model file weight names do not match architecture: {path}")
    state = {
        name: torch.from_numpy(arrays[name].copy()).to(template[name].dtype)
        for name in template
    }
    net.load_state_dict(state)
    net.eval()
    return ModelState(config, net, training_steps=meta["training_steps"], format_version=version)
