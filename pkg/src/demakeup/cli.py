"""Operator entry points: fixture generation, preprocessing, training,
single-image de-makeup with attention export, and evaluation.

Exit codes: 0 success, 1 runtime failure, 2 usage/validation error.
Training options come from an optional key=value config file overridden by
command-line flags.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import data as datamod
from . import evaluation, figures, regions, training
from .data import VALID_IMAGE_SIZES

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

logger = logging.getLogger(__name__)


class UsageError(ValueError):
    pass


_TRAIN_FIELDS = {f.name: f.type for f in fields(training.TrainConfig)}
_FILE_ONLY_KEYS = {"manifest", "out", "disable_loss", "region_mapping"}
_ABLATABLE = ("id", "sat", "adv")


def parse_config_file(path) -> dict:
    """key=value lines with # comments; unknown keys are errors."""
    entries = {}
    config_path = Path(path)
    if not config_path.exists():
        raise UsageError(f"config file not found: {config_path}")
    for lineno, raw in enumerate(config_path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{config_path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _TRAIN_FIELDS and key not in _FILE_ONLY_KEYS:
            raise UsageError(f"{config_path}:{lineno}: unknown key {key!r}")
        entries[key] = value
    return entries


def _coerce(key: str, value: str):
    typ = _TRAIN_FIELDS[key]
    if typ in ("bool", bool):
        lowered = value.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"cannot parse boolean {key}={value!r}")
    try:
        if typ in ("int", int):
            return int(value)
        if typ in ("float", float):
            return float(value)
    except ValueError as exc:
        raise UsageError(f"cannot parse {key}={value!r}: {exc}") from exc
    return value


def build_train_config(file_entries: dict, overrides: dict) -> training.TrainConfig:
    merged = asdict(training.TrainConfig())
    for key, value in file_entries.items():
        if key in _TRAIN_FIELDS:
            merged[key] = _coerce(key, value)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    config = training.TrainConfig(**merged)
    try:
        config.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return config


def _apply_disable_flags(config: training.TrainConfig, disabled) -> training.TrainConfig:
    for name in disabled or ():
        if name not in _ABLATABLE:
            raise UsageError(f"--disable-loss must be one of {_ABLATABLE}, got {name!r}")
        setattr(config, f"enable_{name}", False)
    return config


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_fixtures(args) -> int:
    if args.size not in VALID_IMAGE_SIZES:
        raise UsageError(f"--size must be one of {VALID_IMAGE_SIZES}, got {args.size}")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    manifest = datamod.synthesize_fixture_dataset(args.seed, args.count, args.size, args.out)
    print(manifest)
    return EXIT_OK


def _load_mapping(path):
    return regions.load_mapping(path) if path else None


def cmd_preprocess(args) -> int:
    samples = datamod.load_manifest(args.manifest)
    mapping = _load_mapping(args.region_mapping)
    processed = datamod.preprocess_dataset(samples, args.out, mapping=mapping)
    out_manifest = Path(args.out) / "manifest.txt"
    datamod.save_manifest(out_manifest, processed)
    print(out_manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    file_entries = parse_config_file(args.config) if args.config else {}
    manifest = args.manifest or file_entries.get("manifest")
    out = args.out or file_entries.get("out")
    if not manifest:
        raise UsageError("--manifest is required (flag or config file)")
    if not out:
        raise UsageError("--out is required (flag or config file)")
    overrides = {
        "seed": args.seed,
        "image_size": args.image_size,
        "batch_size": args.batch_size,
        "learning_rate": args.learning_rate,
        "max_steps": args.max_steps,
        "checkpoint_interval": args.checkpoint_interval,
        "extractor": args.extractor,
    }
    config = build_train_config(file_entries, overrides)
    disabled = args.disable_loss
    if disabled is None and "disable_loss" in file_entries:
        disabled = [t.strip() for t in file_entries["disable_loss"].split(",") if t.strip()]
    _apply_disable_flags(config, disabled)

    mapping_path = args.region_mapping or file_entries.get("region_mapping")
    mapping = _load_mapping(mapping_path)
    samples = datamod.load_manifest(manifest)
    out_dir = Path(out)
    cache_dir = out_dir / "preprocessed"
    processed = datamod.preprocess_dataset(samples, cache_dir, mapping=mapping)
    if not processed:
        raise UsageError("no usable samples after preprocessing")
    datamod.save_manifest(cache_dir / "manifest.txt", processed)

    ckpt_path, history = training.fit(
        processed, config, out_dir, resume=args.resume
    )
    log_path = out_dir / "loss_log.txt"
    figures.save_loss_curves(log_path, out_dir / "loss_curves.png")
    if history:
        last = history[-1]
        print(f"final losses: rec={last.rec:.6f} total={last.total:.6f}")
    print(ckpt_path)
    return EXIT_OK


def _load_trainer(checkpoint):
    try:
        return training.Trainer.load_checkpoint(checkpoint)
    except training.CheckpointError:
        raise


def cmd_demakeup(args) -> int:
    import torch

    trainer = _load_trainer(args.checkpoint)
    image = datamod.decode_image(args.input)
    batch = torch.from_numpy(image.transpose(2, 0, 1)[None])
    with torch.no_grad():
        _, z = trainer.generator(batch)
        attention = trainer.attention(batch)
    z_img = z[0].numpy().transpose(1, 2, 0)
    attention_map = attention[0, 0].numpy()

    datamod.encode_image(args.output, z_img)
    raw = np.rint(np.clip(attention_map, 0.0, 1.0) * 255.0).astype(np.uint8)
    from PIL import Image

    Image.fromarray(raw, mode="L").save(args.attention_out, format="PNG")
    # Brightness-modulated overlay: attended (cosmetic) pixels go dark.
    overlay = ((image + 1.0) * 0.5) * (1.0 - attention_map)[..., None]
    overlay_path = Path(args.attention_out)
    overlay_path = overlay_path.with_name(overlay_path.stem + "_overlay.png")
    Image.fromarray(np.rint(np.clip(overlay, 0.0, 1.0) * 255.0).astype(np.uint8), mode="RGB").save(
        overlay_path, format="PNG"
    )
    print(args.output)
    print(args.attention_out)
    print(overlay_path)
    return EXIT_OK


def cmd_eval(args) -> int:
    trainer = _load_trainer(args.checkpoint)
    samples = datamod.load_manifest(args.manifest)
    report = evaluation.verification_via_generation(trainer, samples)
    report.metadata["checkpoint"] = str(args.checkpoint)
    report.metadata["manifest"] = str(args.manifest)
    report_path = Path(args.report)
    if report_path.parent != Path(""):
        report_path.parent.mkdir(parents=True, exist_ok=True)
    evaluation.write_report(report, report_path)
    figures.save_roc_figure(
        report.generated.scores,
        report.baseline.scores,
        report_path.with_name(report_path.stem + "_roc.png"),
    )
    figures.save_score_histograms(
        report.generated.scores,
        report.baseline.scores,
        report_path.with_name(report_path.stem + "_scores.png"),
    )
    print(f"rank1={report.generated.rank1}")
    print(f"tpr_at_fpr_0.1pct={report.generated.tpr_0p1}")
    print(f"tpr_at_fpr_1pct={report.generated.tpr_1}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="demakeup", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixtures", help="generate a synthetic paired dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fixtures)

    p = sub.add_parser("preprocess", help="warp references and merge parse maps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--region-mapping", help="JSON parser-code to region-code table")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train generator, attention module, discriminator")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--disable-loss", action="append", choices=_ABLATABLE)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--seed", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int)
    p.add_argument("--extractor")
    p.add_argument("--region-mapping")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("demakeup", help="run one image through G and A")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--attention-out", dest="attention_out", required=True)
    p.set_defaults(func=cmd_demakeup)

    p = sub.add_parser("eval", help="verification-via-generation report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - single operator-facing surface
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
