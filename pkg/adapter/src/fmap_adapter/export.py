"""Feature/manifest export: images + annotations -> FMAP files + manifest.

One FMAP file per image (plus one per photometric variant when requested),
a manifest JSON binding features, annotations, roles and proposals, and an
`export_meta` block recording the backbone, resize and jitter settings,
seed, and subset request so a run can be reproduced exactly.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from PIL import Image

from .backbones import create_backbone
from .datasets import ImageRecord, load_coco, load_proposals
from .formats import manifest_document, write_fmap, write_json
from .jitter import JitterRecipe, apply_jitter, sample_jitter_params
from .subset import select_n_shot

log = logging.getLogger(__name__)


@dataclass
class ExportJob:
    images_dir: str
    annotations: str                 # COCO-style JSON
    output_dir: str
    backbone: str = "stub"
    patch_size: Optional[int] = None  # stub only; real backbones fix their own
    dim: Optional[int] = None
    novel_classes: tuple[str, ...] = ()
    split_role: str = "train_shots"
    n_shot: Optional[int] = None
    seed: int = 0
    jitter_variants: int = 0
    jitter: JitterRecipe = field(default_factory=JitterRecipe)
    resize: Optional[tuple[int, int]] = None  # (width, height)
    proposals: Optional[str] = None
    device: str = "cpu"


@dataclass
class ExportResult:
    manifest_path: str
    exported: int
    skipped: int
    diagnostics: list[str]
    class_counts: dict[str, int]


def load_image(path: str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def export_features(job: ExportJob,
                    backbone=None,
                    proposal_fn: Optional[Callable[[ImageRecord],
                                                   list[list[float]]]] = None
                    ) -> ExportResult:
    """Run the export; per-item failures become diagnostics, and the job
    aborts only when no image could be exported at all."""
    if backbone is None:
        backbone = create_backbone(job.backbone, patch_size=job.patch_size,
                                   dim=job.dim, device=job.device)
    records, class_names = load_coco(job.annotations)
    roles = [(name, "novel" if name in set(job.novel_classes) else "base")
             for name in class_names]

    class_counts: dict[str, int] = {}
    if job.n_shot is not None:
        records, class_counts = select_n_shot(records, class_names,
                                              job.n_shot, job.seed)
        log.info("n-shot selection: %d images, counts %s",
                 len(records), class_counts)

    proposals_by_image = load_proposals(job.proposals) if job.proposals else {}
    rng = np.random.default_rng(job.seed)
    features_dir = os.path.join(job.output_dir, "features")
    os.makedirs(features_dir, exist_ok=True)

    entries = []
    diagnostics: list[str] = []
    skipped = 0
    for rec in records:
        image_path = os.path.join(job.images_dir, rec.file_name)
        try:
            image = load_image(image_path)
        except (OSError, ValueError) as exc:
            diagnostics.append(f"{rec.image_id}: unreadable image "
                               f"{image_path}: {exc}")
            skipped += 1
            continue

        scale_x = scale_y = 1.0
        if job.resize is not None:
            new_w, new_h = job.resize
            scale_x = new_w / image.shape[1]
            scale_y = new_h / image.shape[0]
            with Image.fromarray((image * 255).astype(np.uint8)) as im:
                image = np.asarray(im.resize((new_w, new_h), Image.BILINEAR),
                                   dtype=np.float32) / 255.0

        image_h, image_w = image.shape[:2]
        base_rel = os.path.join("features", f"{rec.image_id}.fmap")
        try:
            grid = backbone.extract(image)
        except Exception as exc:  # backbone failures are per-item too
            diagnostics.append(f"{rec.image_id}: feature extraction failed: {exc}")
            skipped += 1
            continue
        write_fmap(os.path.join(job.output_dir, base_rel), grid,
                   backbone.patch_size, image_h, image_w)

        variants = []
        for v in range(job.jitter_variants):
            params = sample_jitter_params(rng, job.jitter)
            variant_rel = os.path.join("features", f"{rec.image_id}_v{v}.fmap")
            write_fmap(os.path.join(job.output_dir, variant_rel),
                       backbone.extract(apply_jitter(image, params)),
                       backbone.patch_size, image_h, image_w)
            variants.append(variant_rel)

        def scaled(box):
            return [box[0] * scale_x, box[1] * scale_y,
                    box[2] * scale_x, box[3] * scale_y]

        entry = {
            "image_id": rec.image_id,
            "feature_file": base_rel,
            "image_h": image_h,
            "image_w": image_w,
            "annotations": [{"box": scaled(a.box), "class": a.class_name,
                             "mask": None} for a in rec.annotations],
            "proposals": [scaled(b) for b in
                          (proposal_fn(rec) if proposal_fn is not None
                           else proposals_by_image.get(rec.image_id, []))],
        }
        if variants:
            entry["feature_variants"] = variants
        entries.append(entry)

    if not entries:
        raise RuntimeError("export produced no images; diagnostics: "
                           + "; ".join(diagnostics[:5]))
    for d in diagnostics:
        log.warning("%s", d)

    meta = {
        "backbone": backbone.name,
        "patch_size": backbone.patch_size,
        "dim": backbone.dim,
        "resize": None if job.resize is None else list(job.resize),
        "jitter_variants": job.jitter_variants,
        "jitter": {"brightness": job.jitter.brightness,
                   "contrast": job.jitter.contrast,
                   "saturation": job.jitter.saturation,
                   "hue": job.jitter.hue} if job.jitter_variants else None,
        "n_shot": job.n_shot,
        "seed": job.seed,
        "class_counts": class_counts or None,
    }
    manifest_path = os.path.join(job.output_dir, "manifest.json")
    write_json(manifest_path,
               manifest_document(roles, job.split_role, entries, meta))
    return ExportResult(manifest_path=manifest_path, exported=len(entries),
                        skipped=skipped, diagnostics=diagnostics,
                        class_counts=class_counts)
