"""fmap-export: command-line front end for the adapter.

Flag style, logging and exit codes mirror the detection engine's CLI:
0 success, 1 data/runtime failure, 2 usage error; logs on stderr
(FMAP_ADAPTER_LOG controls verbosity); a config echo lands next to outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .datasets import load_coco
from .export import ExportJob, export_features
from .jitter import JitterRecipe
from .formats import write_json
from .subset import select_n_shot

log = logging.getLogger("fmap_adapter")


def _configure_logging() -> None:
    level_name = os.environ.get("FMAP_ADAPTER_LOG", "warning").upper()
    logging.basicConfig(stream=sys.stderr,
                        level=getattr(logging, level_name, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fmap-export",
        description="Export backbone feature maps and annotations into the "
                    "detection engine's FMAP/manifest formats.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("export", help="extract features and write a manifest")
    p.add_argument("--images", required=True, help="image root directory")
    p.add_argument("--annotations", required=True, help="COCO-style JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--backbone", default="stub",
                   help="stub | dinov2_vit{s,b,l,g}14 | clip:<model id>")
    p.add_argument("--patch-size", type=int, default=None,
                   help="patch size for the stub backbone")
    p.add_argument("--dim", type=int, default=None,
                   help="feature dimension for the stub backbone")
    p.add_argument("--novel-classes", default="",
                   help="comma-separated names; all others are base")
    p.add_argument("--split-role", choices=["train_shots", "test"],
                   default="train_shots")
    p.add_argument("--n-shot", type=int, default=None,
                   help="greedy subset with about N instances per class")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--jitter-variants", type=int, default=0,
                   help="photometric variants per image")
    p.add_argument("--brightness", type=float, default=0.2)
    p.add_argument("--contrast", type=float, default=0.2)
    p.add_argument("--saturation", type=float, default=0.2)
    p.add_argument("--hue", type=float, default=0.1)
    p.add_argument("--resize", default=None, metavar="WxH",
                   help="resize images before extraction, e.g. 602x602")
    p.add_argument("--proposals", default=None,
                   help="precomputed proposals JSON "
                        "({image_id: [[x0,y0,x1,y1], ...]})")
    p.add_argument("--device", default="cpu")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("subset",
                       help="preview an N-shot selection without exporting")
    p.add_argument("--annotations", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--classes", default="",
                   help="comma-separated subset of classes (default: all)")
    p.add_argument("--out", required=True, help="selection JSON")
    p.set_defaults(func=cmd_subset)
    return parser


def _parse_resize(text):
    if text is None:
        return None
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError as exc:
        raise ValueError(f"--resize expects WxH, got {text!r}") from exc


def cmd_export(args) -> int:
    job = ExportJob(
        images_dir=args.images,
        annotations=args.annotations,
        output_dir=args.out,
        backbone=args.backbone,
        patch_size=args.patch_size,
        dim=args.dim,
        novel_classes=tuple(c.strip() for c in args.novel_classes.split(",")
                            if c.strip()),
        split_role=args.split_role,
        n_shot=args.n_shot,
        seed=args.seed,
        jitter_variants=args.jitter_variants,
        jitter=JitterRecipe(brightness=args.brightness, contrast=args.contrast,
                            saturation=args.saturation, hue=args.hue),
        resize=_parse_resize(args.resize),
        proposals=args.proposals,
        device=args.device,
    )
    result = export_features(job)
    for d in result.diagnostics:
        print(f"warning: {d}", file=sys.stderr)
    log.info("exported %d images (%d skipped) -> %s",
             result.exported, result.skipped, result.manifest_path)
    write_json(result.manifest_path + ".config.json", {
        "tool": "fmap-export",
        "subcommand": "export",
        "args": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
    })
    return 0


def cmd_subset(args) -> int:
    records, class_names = load_coco(args.annotations)
    wanted = ([c.strip() for c in args.classes.split(",") if c.strip()]
              or class_names)
    unknown = [c for c in wanted if c not in class_names]
    if unknown:
        raise ValueError(f"unknown class(es): {unknown}")
    selected, counts = select_n_shot(records, wanted, args.n, args.seed)
    write_json(args.out, {
        "n": args.n,
        "seed": args.seed,
        "images": [r.image_id for r in selected],
        "class_counts": counts,
    })
    return 0


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, RuntimeError,
            json.JSONDecodeError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
