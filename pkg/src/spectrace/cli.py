"""Command-line entry point.

Subcommands: train, analyze, detect, localize, eval, synth. Every command
takes --config pointing at a YAML pipeline config; common flags (--seed,
--workers, --out) and per-command threshold/method flags override it. The
effective config is echoed into the output directory of every run, and
exit codes are 0 (success), 1 (usage or config error), 2 (data error),
3 (numerical failure).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import PipelineConfig, load_config, save_config
from .consistency import ResponseMap, load_response_raw, save_response_png, save_response_raw
from .decision import DETECTION_METHODS, localize, score_response
from .encoder import ModelState, build_encoder, load_model, save_model
from .errors import ConfigError, DataError, NumericalError, SpectraceError
from .imagedata import (
    DatasetManifest,
    ImageRecord,
    ManifestEntry,
    RectRegion,
    SignatureParams,
    SpliceSpec,
    apply_signature,
    generate_synthetic_splice,
    load_image,
    load_manifest,
    make_base_image,
    save_image,
    save_manifest,
    save_mask,
)
from .metrics import evaluate_dataset
from .pipeline import STAGES, compute_response
from .trainer import StepRecord, build_patch_pool, train


class _Parser(argparse.ArgumentParser):
    # usage problems must exit 1, not argparse's default 2
    def error(self, message: str):
        raise ConfigError(message)


def _echo_config(config: PipelineConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, out_dir / "config_echo.yaml")


def _load_model_checked(config: PipelineConfig) -> ModelState:
    if config.paths.model is None:
        raise ConfigError("paths.model is not set in the config")
    model = load_model(config.paths.model)
    if model.config != config.encoder:
        raise ConfigError(
            f"model at {config.paths.model} was built as {model.config}, "
            f"but the config asks for {config.encoder}"
        )
    return model


def _eval_manifest(config: PipelineConfig) -> DatasetManifest:
    if config.paths.eval_manifest is None:
        raise ConfigError("paths.eval_manifest is not set in the config")
    return load_manifest(config.paths.eval_manifest)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(config: PipelineConfig, log_every: int = 0) -> int:
    if config.paths.train_manifest is None:
        raise ConfigError("paths.train_manifest is not set in the config")
    if config.paths.model is None:
        raise ConfigError("paths.model is not set in the config")
    out_dir = Path(config.paths.out_dir)
    _echo_config(config, out_dir)

    manifest = load_manifest(config.paths.train_manifest)
    if len(manifest) < config.train.batch_pairs:
        raise DataError(
            f"training manifest has {len(manifest)} images but every batch needs "
            f"{config.train.batch_pairs} distinct ones; refusing to start"
        )

    model_path = Path(config.paths.model)
    if model_path.exists():
        model = load_model(model_path)
        if model.config != config.encoder:
            raise ConfigError("existing model settings differ from the config; refusing to resume")
        print(f"resuming {model_path} from step {model.training_steps}")
    else:
        model = build_encoder(config.encoder, config.seed)
    if model.training_steps >= config.train.total_steps:
        print(f"model already has {model.training_steps} steps; nothing to do")
        return 0

    pool = build_patch_pool(
        manifest, config.train.patches_per_image, config.patch_size, config.seed
    )
    every = log_every or max(1, config.train.total_steps // 20)

    def progress(rec: StepRecord) -> None:
        if (rec.step + 1) % every == 0 or rec.step == 0:
            print(
                f"step {rec.step + 1}/{config.train.total_steps} lr={rec.lr:.3g} "
                f"loss={rec.loss:.4f} margin={rec.intra_sim - rec.inter_sim:+.3f}"
            )

    checkpoint_dir = out_dir / "checkpoints" if config.train.checkpoint_every > 0 else None
    log = train(model, pool, config.train, config.normalization, checkpoint_dir, progress)
    save_model(model, model_path)
    log.write_csv(out_dir / "train_log.csv")
    print(f"wrote {model_path}")
    return 0


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def cmd_analyze(config: PipelineConfig, image_path: str) -> int:
    model = _load_model_checked(config)
    image = load_image(image_path)
    response, timings = compute_response(model, image, config)

    out_dir = Path(config.paths.out_dir)
    _echo_config(config, out_dir)
    png = out_dir / f"{image.image_id}_response.png"
    raw = out_dir / f"{image.image_id}_response.raw"
    save_response_png(response, png)
    save_response_raw(response, raw)

    rows = (image.height - config.patch_size[0]) // config.stride + 1
    cols = (image.width - config.patch_size[1]) // config.stride + 1
    stages = " ".join(f"{s}={timings[s]:.4f}s" for s in STAGES)
    print(f"timing: {stages} total={sum(timings.values()):.4f}s (J={rows * cols})")
    print(f"wrote {png} and {raw}")
    return 0


# ---------------------------------------------------------------------------
# detect / localize / eval
# ---------------------------------------------------------------------------


def _gather_responses(
    config: PipelineConfig,
    manifest: DatasetManifest,
    responses_dir: str | None,
) -> tuple[dict[str, ResponseMap], list[str]]:
    """Response map per image id, computing or loading as configured.

    Per-image failures are collected, not raised, so one bad input cannot
    sink a whole dataset run.
    """
    model = None if responses_dir is not None else _load_model_checked(config)

    def one(entry: ManifestEntry) -> ResponseMap:
        if responses_dir is not None:
            raw = Path(responses_dir) / f"{entry.image_id}_response.raw"
            if not raw.exists():
                raise DataError(f"missing response file {raw}")
            return load_response_raw(raw, entry.image_id)
        image = load_image(entry.path, entry.image_id)
        response, _ = compute_response(model, image, config)
        return response

    entries = sorted(manifest.entries, key=lambda e: e.image_id)
    results: dict[str, ResponseMap] = {}
    errors: list[str] = []

    def record(entry: ManifestEntry, outcome) -> None:
        if isinstance(outcome, Exception):
            errors.append(f"{entry.image_id}: {outcome}")
        else:
            results[entry.image_id] = outcome

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as executor:
            futures = [(e, executor.submit(one, e)) for e in entries]
            for entry, future in futures:
                try:
                    record(entry, future.result())
                except (SpectraceError, FileNotFoundError, OSError) as exc:
                    record(entry, exc)
    else:
        for entry in entries:
            try:
                record(entry, one(entry))
            except (SpectraceError, FileNotFoundError, OSError) as exc:
                record(entry, exc)
    return results, errors


def _report_errors(errors: list[str]) -> None:
    for line in errors:
        print(f"error: {line}", file=sys.stderr)


def cmd_detect(config: PipelineConfig, responses_dir: str | None = None) -> int:
    manifest = _eval_manifest(config)
    out_dir = Path(config.paths.out_dir)
    _echo_config(config, out_dir)
    responses, errors = _gather_responses(config, manifest, responses_dir)

    lines = ["image_id,method,score,inverted,verdict"]
    for entry in sorted(manifest.entries, key=lambda e: e.image_id):
        if entry.image_id in responses:
            result = score_response(
                responses[entry.image_id], config.detection_method, config.thresholds
            )
            lines.append(result.csv_row(config.thresholds.rho_threshold))
    out_path = out_dir / "detection.csv"
    out_path.write_text("\n".join(lines) + "\n")
    print(f"wrote {out_path} ({len(lines) - 1} images, method={config.detection_method})")
    _report_errors(errors)
    return 2 if errors else 0


def cmd_localize(config: PipelineConfig, responses_dir: str | None = None) -> int:
    manifest = _eval_manifest(config)
    out_dir = Path(config.paths.out_dir)
    _echo_config(config, out_dir)
    responses, errors = _gather_responses(config, manifest, responses_dir)

    mask_dir = out_dir / "masks"
    written = 0
    for image_id in sorted(responses):
        mask = localize(responses[image_id], config.thresholds)
        save_mask(mask.values, mask_dir / f"{image_id}_mask.png")
        written += 1
    print(
        f"wrote {written} masks to {mask_dir} "
        f"(delta_l={config.thresholds.localization_threshold:g})"
    )
    _report_errors(errors)
    return 2 if errors else 0


def cmd_eval(config: PipelineConfig, responses_dir: str | None = None) -> int:
    manifest = _eval_manifest(config)
    out_dir = Path(config.paths.out_dir)
    _echo_config(config, out_dir)
    responses, errors = _gather_responses(config, manifest, responses_dir)

    usable: list[ManifestEntry] = []
    for entry in sorted(manifest.entries, key=lambda e: e.image_id):
        if entry.image_id not in responses:
            continue
        if entry.label == "spliced" and (entry.mask_path is None or not entry.mask_path.exists()):
            errors.append(f"{entry.image_id}: missing ground-truth mask {entry.mask_path}")
            continue
        usable.append(entry)

    _report_errors(errors)
    report = evaluate_dataset(
        DatasetManifest(usable), responses, config.thresholds, config.detection_method
    )
    report.write_csv(out_dir / "report.csv")
    print(report.summary())
    print(f"wrote {out_dir / 'report.csv'}")
    return 2 if errors else 0


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def _jitter_signature(
    sig: SignatureParams, jitter: float, rng: np.random.Generator
) -> SignatureParams:
    """Perturb a signature family so every image gets its own variant."""
    if jitter == 0:
        return sig

    def wobble(v: float) -> float:
        return v * (1.0 + jitter * rng.uniform(-1.0, 1.0))

    return SignatureParams(
        noise_strength=wobble(sig.noise_strength),
        band_center=wobble(sig.band_center),
        band_width=wobble(sig.band_width),
        quant_strength=sig.quant_strength,
    )


def cmd_synth(config: PipelineConfig) -> int:
    """Write a synthetic corpus: an authentic training split carrying two
    signature families, and a test split of authentic + spliced images with
    ground-truth masks."""
    synth = config.synth
    out_dir = Path(config.paths.out_dir)
    _echo_config(config, out_dir)
    height, width = synth.image_size
    families = (synth.signature_a, synth.signature_b)
    ss_train, ss_test = np.random.SeedSequence(config.seed).spawn(2)

    train_dir = out_dir / "train"
    train_entries: list[ManifestEntry] = []
    for i, child in enumerate(ss_train.spawn(synth.train_count)):
        rng = np.random.default_rng(child)
        sig = _jitter_signature(families[i % 2], synth.jitter, rng)
        pixels = apply_signature(make_base_image(height, width, rng), sig, rng)
        image_id = f"train_{i:03d}"
        path = train_dir / "images" / f"{image_id}.png"
        save_image(ImageRecord(image_id, pixels), path)
        train_entries.append(ManifestEntry(path, image_id, None, "authentic"))
    save_manifest(DatasetManifest(train_entries), train_dir / "manifest.csv")

    count = synth.test_count
    test_dir = out_dir / "test"
    test_entries: list[ManifestEntry] = []
    children = ss_test.spawn(2 * count)
    for i in range(count):
        rng = np.random.default_rng(children[i])
        sig = _jitter_signature(families[i % 2], synth.jitter, rng)
        pixels = apply_signature(make_base_image(height, width, rng), sig, rng)
        image_id = f"auth_{i:03d}"
        path = test_dir / "images" / f"{image_id}.png"
        save_image(ImageRecord(image_id, pixels), path)
        test_entries.append(ManifestEntry(path, image_id, None, "authentic"))
    for i in range(count):
        rng = np.random.default_rng(children[count + i])
        host_sig = _jitter_signature(families[i % 2], synth.jitter, rng)
        donor_sig = _jitter_signature(families[(i + 1) % 2], synth.jitter, rng)
        host = ImageRecord(f"host_{i:03d}", make_base_image(height, width, rng))
        donor = ImageRecord(f"donor_{i:03d}", make_base_image(height, width, rng))
        rh = int(rng.integers(synth.region_min, synth.region_max + 1))
        rw = int(rng.integers(synth.region_min, synth.region_max + 1))
        region = RectRegion(
            top=int(rng.integers(0, height - rh + 1)),
            left=int(rng.integers(0, width - rw + 1)),
            height=rh,
            width=rw,
        )
        spec = SpliceSpec(donor.image_id, host.image_id, region, host_sig, donor_sig)
        composite, mask = generate_synthetic_splice(
            spec, host, donor, seed=int(rng.integers(2**31))
        )
        image_id = f"spliced_{i:03d}"
        path = test_dir / "images" / f"{image_id}.png"
        mask_path = test_dir / "masks" / f"{image_id}_mask.png"
        save_image(ImageRecord(image_id, composite.pixels), path)
        save_mask(mask, mask_path)
        test_entries.append(ManifestEntry(path, image_id, mask_path, "spliced"))
    save_manifest(DatasetManifest(test_entries), test_dir / "manifest.csv")

    if synth.train_count == 0 or count == 0:
        print("warning: a split is empty; downstream commands will have nothing to do", file=sys.stderr)
    print(f"wrote {len(train_entries)} training images under {train_dir}")
    print(f"wrote {len(test_entries)} test images ({count} spliced) under {test_dir}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _apply_overrides(config: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    updates: dict = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
        updates["train"] = dataclasses.replace(config.train, seed=args.seed)
    if getattr(args, "workers", None) is not None:
        updates["workers"] = args.workers
    if getattr(args, "out", None) is not None:
        updates["paths"] = dataclasses.replace(config.paths, out_dir=args.out)
    threshold_updates = {}
    if getattr(args, "delta_b", None) is not None:
        threshold_updates["delta_b"] = args.delta_b
    if getattr(args, "delta_l", None) is not None:
        threshold_updates["delta_l"] = args.delta_l
    if threshold_updates:
        updates["thresholds"] = dataclasses.replace(config.thresholds, **threshold_updates)
    if getattr(args, "method", None) is not None:
        updates["detection_method"] = args.method
    synth_updates = {}
    if getattr(args, "count", None) is not None:
        synth_updates["test_count"] = args.count
    if getattr(args, "train_count", None) is not None:
        synth_updates["train_count"] = args.train_count
    if synth_updates:
        updates["synth"] = dataclasses.replace(config.synth, **synth_updates)
    if not updates:
        return config
    try:
        return dataclasses.replace(config, **updates)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _build_parser() -> _Parser:
    parser = _Parser(prog="spectrace", description="patch-consistency splicing analysis")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="YAML pipeline config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--workers", type=int, help="override the worker count")
        p.add_argument("--out", help="override the output directory")

    p = sub.add_parser("train", help="train an encoder from a training manifest")
    common(p)
    p.set_defaults(func=lambda config, args: cmd_train(config))

    p = sub.add_parser("analyze", help="compute the response map of one image")
    common(p)
    p.add_argument("image", help="image file to analyze")
    p.set_defaults(func=lambda config, args: cmd_analyze(config, args.image))

    p = sub.add_parser("detect", help="score every manifest image for splicing")
    common(p)
    p.add_argument("--delta-b", type=float, dest="delta_b", help="override thresholds.delta_b")
    p.add_argument("--method", choices=DETECTION_METHODS, help="override the detection method")
    p.add_argument("--responses", help="reuse precomputed .raw responses from this directory")
    p.set_defaults(func=lambda config, args: cmd_detect(config, args.responses))

    p = sub.add_parser("localize", help="write binary splice masks for every manifest image")
    common(p)
    p.add_argument("--delta-l", type=float, dest="delta_l", help="override thresholds.delta_l")
    p.add_argument("--responses", help="reuse precomputed .raw responses from this directory")
    p.set_defaults(func=lambda config, args: cmd_localize(config, args.responses))

    p = sub.add_parser("eval", help="detection + localization metrics over a manifest")
    common(p)
    p.add_argument("--delta-b", type=float, dest="delta_b", help="override thresholds.delta_b")
    p.add_argument("--delta-l", type=float, dest="delta_l", help="override thresholds.delta_l")
    p.add_argument("--method", choices=DETECTION_METHODS, help="override the detection method")
    p.add_argument("--responses", help="reuse precomputed .raw responses from this directory")
    p.set_defaults(func=lambda config, args: cmd_eval(config, args.responses))

    p = sub.add_parser("synth", help="generate a synthetic train/test corpus")
    common(p)
    p.add_argument("--count", type=int, help="test images per class (authentic and spliced)")
    p.add_argument("--train-count", type=int, dest="train_count", help="training image count")
    p.set_defaults(func=lambda config, args: cmd_synth(config))

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        config = _apply_overrides(load_config(args.config), args)
        return args.func(config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except (DataError, FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
