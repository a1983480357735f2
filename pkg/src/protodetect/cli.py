"""Command-line entry point.

Subcommands: validate, build-prototypes, build-background, finetune, detect,
evaluate, classify-eval, export-prototypes, fixture. Logs go to standard
error (verbosity via the PROTODETECT_LOG environment variable); machine
outputs go to files only, written atomically, and every run drops a config
echo JSON next to its outputs. Exit codes: 0 success, 1 data/runtime failure,
2 usage error. Stochastic subcommands require an explicit --seed so reruns
are exact.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .classify import SCORE_MARGIN, SCORE_RAW, detect_image
from .evaluate import evaluate_classification, evaluate_detections
from .fixture import FixtureSpec, generate_fixture
from .io import (
    atomic_write_text,
    export_prototypes_binary,
    export_prototypes_csv,
    load_detections,
    load_entry_features,
    load_manifest,
    load_prototypes,
    save_detections,
    save_prototypes,
    validate_manifest,
    write_json,
)
from .prototypes import (
    DEFAULT_BACKGROUND_K,
    DEFAULT_CROPS_PER_IMAGE,
    build_background_prototypes,
    build_object_prototypes,
    sample_background_crops,
    with_background,
)
from .train import (
    BACKGROUND_TARGET_DYNAMIC,
    BACKGROUND_TARGET_FROZEN,
    TrainConfig,
    finetune,
)

log = logging.getLogger("protodetect")


def _configure_logging() -> None:
    level_name = os.environ.get("PROTODETECT_LOG", "warning").upper()
    level = getattr(logging, level_name, logging.WARNING)
    logging.basicConfig(stream=sys.stderr, level=level,
                        format="%(levelname)s %(name)s: %(message)s")


def _echo_config(args: argparse.Namespace, out_path: str) -> None:
    """Config echo next to the outputs; <out>.config.json, or config.json in
    an output directory."""
    skip = {"func"}
    payload = {
        "tool": "protodetect",
        "version": __version__,
        "subcommand": args.subcommand,
        "args": {k: v for k, v in sorted(vars(args).items()) if k not in skip},
    }
    if os.path.isdir(out_path) or out_path.endswith(os.sep):
        echo = os.path.join(out_path, "config.json")
    else:
        echo = out_path + ".config.json"
    write_json(echo, payload)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protodetect",
        description="Few-shot detection on pre-extracted feature maps "
                    "via prototype classification.")
    parser.add_argument("--threads", type=int, default=0,
                        help="worker-count hint (0 = library default)")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("validate", help="check a manifest and its feature files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--no-check-features", action="store_true",
                   help="skip opening feature files")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("build-prototypes",
                       help="average annotated boxes into object prototypes")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--temperature", type=float, default=0.1)
    p.add_argument("--use-masks", action="store_true",
                   help="weight pooling by annotation masks where present")
    p.set_defaults(func=cmd_build_prototypes)

    p = sub.add_parser("build-background",
                       help="cluster object-free crops into background rows "
                            "and append them to a prototype file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--prototypes", default=None,
                   help="input prototype file (default: --out, in place)")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=DEFAULT_BACKGROUND_K)
    p.add_argument("--crops-per-image", type=int, default=DEFAULT_CROPS_PER_IMAGE)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_build_background)

    p = sub.add_parser("finetune", help="fine-tune prototypes on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--prototypes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", dest="log_path", default=None,
                   help="JSONL training log (one object per epoch)")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--temperature", type=float, default=0.1)
    p.add_argument("--negatives", type=int, default=0,
                   help="negative crops per image")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--background-target",
                   choices=[BACKGROUND_TARGET_DYNAMIC, BACKGROUND_TARGET_FROZEN],
                   default=BACKGROUND_TARGET_DYNAMIC)
    p.add_argument("--freeze-background", action="store_true",
                   help="exclude background rows from parameter updates")
    p.add_argument("--use-masks", action="store_true")
    for flag in ("hflip", "vflip", "rot90", "crop"):
        p.add_argument(f"--no-{flag}", action="store_true",
                       help=f"disable the {flag} augmentation")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("detect", help="classify manifest proposals")
    p.add_argument("--manifest", required=True)
    p.add_argument("--prototypes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--nms-iou", type=float, default=0.5)
    p.add_argument("--nms-class-agnostic", action="store_true",
                   help="suppress across classes instead of per class")
    p.add_argument("--score", choices=[SCORE_RAW, SCORE_MARGIN], default=SCORE_RAW)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="mAP at IoU 0.5 against a manifest")
    p.add_argument("--detections", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--classes", default="all",
                   help="novel | base | all | comma-separated names")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--voc11", action="store_true",
                   help="legacy 11-point interpolation")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("classify-eval",
                       help="classification-only F1/accuracy on ground-truth boxes")
    p.add_argument("--manifest", required=True)
    p.add_argument("--prototypes", required=True)
    p.add_argument("--use-masks", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_classify_eval)

    p = sub.add_parser("export-prototypes",
                       help="dump the prototype matrix for external tools")
    p.add_argument("--prototypes", required=True)
    p.add_argument("--format", choices=["csv", "binary"], default="csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("fixture", help="generate a synthetic dataset")
    p.add_argument("--spec", default=None, help="FixtureSpec JSON (optional)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_fixture)
    return parser


# ---------------------------------------------------------------------------
# Subcommands


def cmd_validate(args) -> int:
    manifest = load_manifest(args.manifest)
    diags = validate_manifest(manifest, check_features=not args.no_check_features)
    for d in diags:
        print(str(d), file=sys.stderr)
    fatal = sum(1 for d in diags if d.is_fatal)
    if fatal:
        log.error("%d fatal diagnostic(s) in %s", fatal, args.manifest)
        return 1
    return 0


def cmd_build_prototypes(args) -> int:
    manifest = load_manifest(args.manifest)
    protos = build_object_prototypes(manifest, use_masks=args.use_masks,
                                     temperature=args.temperature)
    save_prototypes(protos, args.out)
    _echo_config(args, args.out)
    return 0


def cmd_build_background(args) -> int:
    manifest = load_manifest(args.manifest)
    source = args.prototypes if args.prototypes else args.out
    protos = load_prototypes(source)
    crops = sample_background_crops(manifest,
                                    crops_per_image=args.crops_per_image,
                                    seed=args.seed)
    rows = build_background_prototypes(crops, k=args.k, seed=args.seed)
    save_prototypes(with_background(protos, rows), args.out)
    _echo_config(args, args.out)
    return 0


def cmd_finetune(args) -> int:
    manifest = load_manifest(args.manifest)
    protos = load_prototypes(args.prototypes)
    config = TrainConfig(
        epochs=args.epochs, lr=args.lr, temperature=args.temperature,
        negatives_per_image=args.negatives, seed=args.seed,
        background_target_mode=args.background_target,
        freeze_background=args.freeze_background, use_masks=args.use_masks,
        hflip=not args.no_hflip, vflip=not args.no_vflip,
        rot90=not args.no_rot90, random_crop=not args.no_crop)
    tuned, logs = finetune(manifest, protos, config)
    save_prototypes(tuned, args.out)
    if args.log_path:
        lines = "".join(json.dumps(entry) + "\n" for entry in logs)
        atomic_write_text(args.log_path, lines)
    _echo_config(args, args.out)
    return 0


def cmd_detect(args) -> int:
    manifest = load_manifest(args.manifest)
    protos = load_prototypes(args.prototypes)
    per_image = {}
    for entry in manifest.entries:
        fm = load_entry_features(manifest, entry)
        per_image[entry.image_id] = detect_image(
            fm, list(entry.proposals), protos,
            nms_iou=args.nms_iou, score_mode=args.score,
            nms_class_agnostic=args.nms_class_agnostic)
    save_detections(per_image, protos.class_table, args.out,
                    image_order=[e.image_id for e in manifest.entries])
    _echo_config(args, args.out)
    return 0


def cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest)
    detections = load_detections(args.detections, manifest.class_table)
    class_filter = (args.classes if args.classes in ("all", "novel", "base")
                    else [c.strip() for c in args.classes.split(",") if c.strip()])
    report = evaluate_detections(detections, manifest, iou_thr=args.iou,
                                 class_filter=class_filter, voc11=args.voc11)
    write_json(args.out, report.to_dict())
    _echo_config(args, args.out)
    return 0


def cmd_classify_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    protos = load_prototypes(args.prototypes)
    report = evaluate_classification(manifest, protos, use_masks=args.use_masks)
    write_json(args.out, report.to_dict())
    _echo_config(args, args.out)
    return 0


def cmd_export(args) -> int:
    protos = load_prototypes(args.prototypes)
    if args.format == "csv":
        export_prototypes_csv(protos, args.out)
    else:
        export_prototypes_binary(protos, args.out)
    _echo_config(args, args.out)
    return 0


def cmd_fixture(args) -> int:
    spec = FixtureSpec.from_json(args.spec) if args.spec else FixtureSpec()
    spec.seed = args.seed
    os.makedirs(args.out, exist_ok=True)
    generate_fixture(spec, args.out)
    _echo_config(args, args.out)
    return 0


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints usage itself
        return int(exc.code) if exc.code is not None else 0
    if args.threads:
        log.debug("thread hint: %d (informational only)", args.threads)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except np.linalg.LinAlgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
