"""Structured pipeline configuration.

One YAML document drives every command. The tree mirrors the module
configs (encoder, train, meanshift, thresholds) plus shared geometry
(patch size, stride) that must agree between training and inference, file
paths, and synthetic-fixture parameters. Unknown keys are rejected so a
typo cannot silently fall back to a default, and the effective config can
be re-serialized (echoed) byte-stably for reproducibility.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .consistency import AGGREGATORS, MeanShiftConfig
from .decision import DETECTION_METHODS, Thresholds
from .encoder import EncoderConfig
from .errors import ConfigError
from .imagedata import SignatureParams
from .spectral import NORMALIZATION_MODES
from .trainer import TrainConfig


@dataclass(frozen=True)
class PathsConfig:
    model: str | None = None
    train_manifest: str | None = None
    eval_manifest: str | None = None
    out_dir: str = "out"


@dataclass(frozen=True)
class SynthConfig:
    image_size: tuple[int, int] = (256, 256)
    train_count: int = 40
    test_count: int = 10
    region_min: int = 80
    region_max: int = 128
    signature_a: SignatureParams = field(
        default_factory=lambda: SignatureParams(noise_strength=0.05, band_center=0.12, band_width=0.06)
    )
    signature_b: SignatureParams = field(
        default_factory=lambda: SignatureParams(noise_strength=0.05, band_center=0.38, band_width=0.06)
    )
    jitter: float = 0.1

    def __post_init__(self):
        if self.train_count < 0 or self.test_count < 0:
            raise ConfigError("synth counts must be non-negative")
        if not 2 <= self.region_min <= self.region_max:
            raise ConfigError("need 2 <= region_min <= region_max")
        if self.region_max > min(self.image_size):
            raise ConfigError("region_max cannot exceed the image size")
        if not 0.0 <= self.jitter < 1.0:
            raise ConfigError("jitter must lie in [0, 1)")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    workers: int = 1
    patch_size: tuple[int, int] = (128, 128)
    stride: int = 64
    normalization: str = "signed_log"
    detection_method: str = "spavg"
    aggregator: str = "meanshift"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    meanshift: MeanShiftConfig = field(default_factory=MeanShiftConfig)
    thresholds: Thresholds = field(default_factory=Thresholds)
    paths: PathsConfig = field(default_factory=PathsConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if self.normalization not in NORMALIZATION_MODES:
            raise ConfigError(f"unknown normalization {self.normalization!r}")
        if self.detection_method not in DETECTION_METHODS:
            raise ConfigError(f"unknown detection method {self.detection_method!r}")
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"unknown aggregator {self.aggregator!r}")
        if self.encoder.patch_size != self.patch_size:
            raise ConfigError(
                f"encoder patch size {self.encoder.patch_size} must equal "
                f"pipeline patch size {self.patch_size}"
            )


# ---------------------------------------------------------------------------
# Mapping <-> dataclass plumbing
# ---------------------------------------------------------------------------


def _require_mapping(value: Any, where: str) -> Mapping[str, Any]:
    if not isinstance(value, Mapping):
        raise ConfigError(f"{where} must be a mapping, got {type(value).__name__}")
    return value


def _check_keys(section: Mapping[str, Any], allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(sorted(unknown))}")


def _as_float(value: Any, where: str) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where} must be a number, got {value!r}") from None


def _as_int(value: Any, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where} must be an integer, got {value!r}")
    return value


def _as_pair(value: Any, where: str) -> tuple[int, int]:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(f"{where} must be a pair [height, width]")
    return (_as_int(value[0], where), _as_int(value[1], where))


def _signature_from(section: Mapping[str, Any], where: str) -> SignatureParams:
    _check_keys(section, {"noise_strength", "band_center", "band_width", "quant_strength"}, where)
    kwargs = {k: _as_float(v, f"{where}.{k}") for k, v in section.items()}
    return SignatureParams(**kwargs)


_TOP_KEYS = {
    "seed", "workers", "patch_size", "stride", "normalization", "detection_method",
    "aggregator", "encoder", "train", "meanshift", "thresholds", "paths", "synth",
}
_FLOATY_TRAIN = {"temperature", "peak_lr", "final_lr", "adam_beta1", "adam_beta2"}


def config_from_mapping(doc: Mapping[str, Any]) -> PipelineConfig:
    doc = _require_mapping(doc, "config")
    _check_keys(doc, _TOP_KEYS, "top-level")
    kwargs: dict[str, Any] = {}
    for key in ("seed", "workers", "stride"):
        if key in doc:
            kwargs[key] = _as_int(doc[key], key)
    if "patch_size" in doc:
        kwargs["patch_size"] = _as_pair(doc["patch_size"], "patch_size")
    for key in ("normalization", "detection_method", "aggregator"):
        if key in doc:
            kwargs[key] = str(doc[key])

    patch_size = kwargs.get("patch_size", PipelineConfig.patch_size)
    if "encoder" in doc:
        sec = _require_mapping(doc["encoder"], "encoder")
        _check_keys(sec, {"input_mode", "backbone", "embedding_dim"}, "encoder")
        kwargs["encoder"] = EncoderConfig(
            input_mode=str(sec.get("input_mode", "rfft")),
            backbone=str(sec.get("backbone", "resnet18_like")),
            embedding_dim=_as_int(sec.get("embedding_dim", 256), "encoder.embedding_dim"),
            patch_size=patch_size,
        )
    else:
        kwargs["encoder"] = EncoderConfig(patch_size=patch_size)

    if "train" in doc:
        sec = dict(_require_mapping(doc["train"], "train"))
        allowed = {
            "batch_pairs", "temperature", "peak_lr", "final_lr", "warmup_steps",
            "total_steps", "adam_beta1", "adam_beta2", "symmetric_loss",
            "patches_per_image", "checkpoint_every",
        }
        _check_keys(sec, allowed, "train")
        for k in list(sec):
            if k in _FLOATY_TRAIN:
                sec[k] = _as_float(sec[k], f"train.{k}")
            elif k == "symmetric_loss":
                if not isinstance(sec[k], bool):
                    raise ConfigError("train.symmetric_loss must be a boolean")
            else:
                sec[k] = _as_int(sec[k], f"train.{k}")
        sec.setdefault("seed", kwargs.get("seed", 0))
        try:
            kwargs["train"] = TrainConfig(**sec)
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from None
    else:
        kwargs["train"] = TrainConfig(seed=kwargs.get("seed", 0))

    if "meanshift" in doc:
        sec = _require_mapping(doc["meanshift"], "meanshift")
        _check_keys(sec, {"kernel", "bandwidth", "tolerance", "max_iterations"}, "meanshift")
        bandwidth: float | str = sec.get("bandwidth", "auto")
        if not isinstance(bandwidth, str):
            bandwidth = _as_float(bandwidth, "meanshift.bandwidth")
        try:
            kwargs["meanshift"] = MeanShiftConfig(
                kernel=str(sec.get("kernel", "gaussian")),
                bandwidth=bandwidth,
                tolerance=_as_float(sec.get("tolerance", 1e-5), "meanshift.tolerance"),
                max_iterations=_as_int(sec.get("max_iterations", 100), "meanshift.max_iterations"),
            )
        except ValueError as exc:
            raise ConfigError(f"meanshift: {exc}") from None

    if "thresholds" in doc:
        sec = _require_mapping(doc["thresholds"], "thresholds")
        _check_keys(sec, {"delta_b", "delta_l", "rho_threshold"}, "thresholds")
        try:
            kwargs["thresholds"] = Thresholds(
                delta_b=_as_float(sec.get("delta_b", 0.25), "thresholds.delta_b"),
                delta_l=None if sec.get("delta_l") is None else _as_float(sec["delta_l"], "thresholds.delta_l"),
                rho_threshold=_as_float(sec.get("rho_threshold", 0.5), "thresholds.rho_threshold"),
            )
        except ValueError as exc:
            raise ConfigError(f"thresholds: {exc}") from None

    if "paths" in doc:
        sec = _require_mapping(doc["paths"], "paths")
        _check_keys(sec, {"model", "train_manifest", "eval_manifest", "out_dir"}, "paths")
        kwargs["paths"] = PathsConfig(
            model=None if sec.get("model") is None else str(sec["model"]),
            train_manifest=None if sec.get("train_manifest") is None else str(sec["train_manifest"]),
            eval_manifest=None if sec.get("eval_manifest") is None else str(sec["eval_manifest"]),
            out_dir=str(sec.get("out_dir", "out")),
        )

    if "synth" in doc:
        sec = _require_mapping(doc["synth"], "synth")
        allowed = {
            "image_size", "train_count", "test_count", "region_min", "region_max",
            "signature_a", "signature_b", "jitter",
        }
        _check_keys(sec, allowed, "synth")
        synth_kwargs: dict[str, Any] = {}
        if "image_size" in sec:
            synth_kwargs["image_size"] = _as_pair(sec["image_size"], "synth.image_size")
        for k in ("train_count", "test_count", "region_min", "region_max"):
            if k in sec:
                synth_kwargs[k] = _as_int(sec[k], f"synth.{k}")
        if "jitter" in sec:
            synth_kwargs["jitter"] = _as_float(sec["jitter"], "synth.jitter")
        for k in ("signature_a", "signature_b"):
            if k in sec:
                synth_kwargs[k] = _signature_from(_require_mapping(sec[k], f"synth.{k}"), f"synth.{k}")
        kwargs["synth"] = SynthConfig(**synth_kwargs)

    try:
        return PipelineConfig(**kwargs)
    except (ValueError, ConfigError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def config_to_mapping(config: PipelineConfig) -> dict[str, Any]:
    """Fully explicit mapping of the effective config (no hidden defaults)."""

    def sig(s: SignatureParams) -> dict[str, float]:
        return {
            "noise_strength": s.noise_strength,
            "band_center": s.band_center,
            "band_width": s.band_width,
            "quant_strength": s.quant_strength,
        }

    return {
        "seed": config.seed,
        "workers": config.workers,
        "patch_size": list(config.patch_size),
        "stride": config.stride,
        "normalization": config.normalization,
        "detection_method": config.detection_method,
        "aggregator": config.aggregator,
        "encoder": {
            "input_mode": config.encoder.input_mode,
            "backbone": config.encoder.backbone,
            "embedding_dim": config.encoder.embedding_dim,
        },
        "train": {
            "batch_pairs": config.train.batch_pairs,
            "temperature": config.train.temperature,
            "peak_lr": config.train.peak_lr,
            "final_lr": config.train.final_lr,
            "warmup_steps": config.train.warmup_steps,
            "total_steps": config.train.total_steps,
            "adam_beta1": config.train.adam_beta1,
            "adam_beta2": config.train.adam_beta2,
            "symmetric_loss": config.train.symmetric_loss,
            "patches_per_image": config.train.patches_per_image,
            "checkpoint_every": config.train.checkpoint_every,
        },
        "meanshift": {
            "kernel": config.meanshift.kernel,
            "bandwidth": config.meanshift.bandwidth,
            "tolerance": config.meanshift.tolerance,
            "max_iterations": config.meanshift.max_iterations,
        },
        "thresholds": {
            "delta_b": config.thresholds.delta_b,
            "delta_l": config.thresholds.localization_threshold,
            "rho_threshold": config.thresholds.rho_threshold,
        },
        "paths": {
            "model": config.paths.model,
            "train_manifest": config.paths.train_manifest,
            "eval_manifest": config.paths.eval_manifest,
            "out_dir": config.paths.out_dir,
        },
        "synth": {
            "image_size": list(config.synth.image_size),
            "train_count": config.synth.train_count,
            "test_count": config.synth.test_count,
            "region_min": config.synth.region_min,
            "region_max": config.synth.region_max,
            "signature_a": sig(config.synth.signature_a),
            "signature_b": sig(config.synth.signature_b),
            "jitter": config.synth.jitter,
        },
    }


def load_config(path: Path | str) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    if doc is None:
        doc = {}
    return config_from_mapping(doc)


def save_config(config: PipelineConfig, path: Path | str) -> None:
    """Echo the effective config; load_config(save_config(c)) == c."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config_to_mapping(config), sort_keys=False))
