"""Deterministic synthetic datasets with planted class directions.

Each image is background noise (per-cell random unit vectors scaled by the
noise level) with cell-aligned rectangular plants whose features are a class
direction plus noise. Plant noise has a per-box component (shared by all
cells of one box, so pooling cannot average it away) and a smaller per-cell
component. Class directions are built from orthonormalized seeded vectors so
the pairwise separation angle is exact, which makes acceptance thresholds
analytic rather than empirical.

A fraction of the training shots is contaminated toward the next class's
direction. Plain averaging bakes that contamination into the prototypes,
while discriminative fine-tuning suppresses it, so the fixture reproduces at
desk scale the gap between averaged and fine-tuned prototypes. Test images
are never contaminated.

Output layout under `out_dir`: features/*.fmap, train_manifest.json
(split_role=train_shots), test_manifest.json (split_role=test). Test-split
proposals are the planted boxes plus jittered copies and random distractors.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from .io import save_manifest, write_feature_map
from .types import (
    Annotation,
    ClassTable,
    DatasetManifest,
    FeatureMap,
    ManifestEntry,
    ObjectClass,
    PixelBox,
    ROLE_BASE,
    ROLE_NOVEL,
    SPLIT_TEST,
    SPLIT_TRAIN_SHOTS,
)

PER_CELL_NOISE_FRACTION = 0.25


@dataclass
class FixtureSpec:
    n_classes: int = 4
    dim: int = 32
    grid_h: int = 16
    grid_w: int = 16
    patch_size: int = 8
    images_per_class: int = 10       # train shots
    test_images_per_class: int = 10
    boxes_per_image: int = 1
    separation_deg: float = 90.0     # exact pairwise angle between directions
    noise: float = 0.25
    outlier_fraction: float = 0.3    # contaminated share of training shots
    outlier_strength: float = 2.5
    distractors_per_image: int = 5
    jitters_per_box: int = 2
    seed: int = 0

    @staticmethod
    def from_json(path: str) -> "FixtureSpec":
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        known = {k: doc[k] for k in doc if k in FixtureSpec.__dataclass_fields__}
        return FixtureSpec(**known)

    def to_dict(self) -> dict:
        return asdict(self)

    def check(self) -> None:
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if not (0.0 < self.separation_deg <= 90.0):
            raise ValueError("separation_deg must be in (0, 90]")
        needed = self.n_classes if self.separation_deg == 90.0 else self.n_classes + 1
        if needed > self.dim:
            raise ValueError(
                f"cannot separate {self.n_classes} classes by "
                f"{self.separation_deg} degrees in {self.dim} dimensions")
        if self.noise < 0.0:
            raise ValueError("noise must be >= 0")
        if not (0.0 <= self.outlier_fraction <= 1.0):
            raise ValueError("outlier_fraction must be in [0, 1]")
        if self.images_per_class < 1 or self.boxes_per_image < 1:
            raise ValueError("need at least one image and one box per class")


def class_directions(spec: FixtureSpec, rng: np.random.Generator) -> np.ndarray:
    """Unit directions with exact pairwise angle spec.separation_deg.

    direction_j = cos(theta) * shared + sin(theta) * unique_j over an
    orthonormal frame, with cos(angle) = cos(theta)**2. At 90 degrees the
    shared component vanishes and directions are plainly orthonormal.
    """
    alpha = math.radians(spec.separation_deg)
    theta = math.acos(math.sqrt(math.cos(alpha)))
    n_basis = spec.n_classes + (0 if spec.separation_deg == 90.0 else 1)
    raw = rng.standard_normal((spec.dim, n_basis))
    q, r = np.linalg.qr(raw)
    q = q * np.sign(np.diag(r))  # fix QR sign ambiguity for determinism
    basis = q.T
    if spec.separation_deg == 90.0:
        return basis[: spec.n_classes]
    shared, unique = basis[0], basis[1:]
    return math.cos(theta) * shared[None, :] + math.sin(theta) * unique


def generate_fixture(spec: FixtureSpec, out_dir: str
                     ) -> tuple[DatasetManifest, DatasetManifest]:
    """Write feature files plus train/test manifests; returns both manifests."""
    spec.check()
    rng = np.random.default_rng(spec.seed)
    directions = class_directions(spec, rng)
    n_base = (spec.n_classes + 1) // 2
    table = ClassTable(
        object_classes=tuple(
            ObjectClass(f"class_{c:02d}", ROLE_BASE if c < n_base else ROLE_NOVEL)
            for c in range(spec.n_classes)),
        background_count=0,
    )
    features_dir = os.path.join(out_dir, "features")
    os.makedirs(features_dir, exist_ok=True)

    manifests = []
    for split, count, with_extras in ((SPLIT_TRAIN_SHOTS, spec.images_per_class, False),
                                      (SPLIT_TEST, spec.test_images_per_class, True)):
        tag = "train" if split == SPLIT_TRAIN_SHOTS else "test"
        n_outliers = (round(spec.outlier_fraction * count)
                      if split == SPLIT_TRAIN_SHOTS else 0)
        entries = []
        for class_id in range(spec.n_classes):
            for i in range(count):
                image_id = f"{tag}_c{class_id:02d}_i{i:03d}"
                fm, anns, props = _generate_image(spec, rng, directions,
                                                  class_id, with_extras,
                                                  contaminated=i < n_outliers)
                rel = os.path.join("features", image_id + ".fmap")
                write_feature_map(fm, os.path.join(out_dir, rel))
                entries.append(ManifestEntry(
                    image_id=image_id, feature_file=rel,
                    image_h=fm.image_h, image_w=fm.image_w,
                    annotations=anns, proposals=props))
        manifest = DatasetManifest(entries=tuple(entries), class_table=table,
                                   split_role=split, base_dir=out_dir)
        save_manifest(manifest, os.path.join(out_dir, f"{tag}_manifest.json"))
        manifests.append(manifest)
    return manifests[0], manifests[1]


def _generate_image(spec: FixtureSpec, rng: np.random.Generator,
                    directions: np.ndarray, class_id: int, with_extras: bool,
                    contaminated: bool = False):
    ps = spec.patch_size
    image_h, image_w = spec.grid_h * ps, spec.grid_w * ps

    data = rng.standard_normal((spec.grid_h, spec.grid_w, spec.dim))
    norms = np.linalg.norm(data, axis=2, keepdims=True)
    data = spec.noise * data / norms

    base_direction = directions[class_id]
    if contaminated:
        confuser = directions[(class_id + 1) % spec.n_classes]
        base_direction = base_direction + spec.outlier_strength * confuser

    plant_cells = _plant_rectangles(spec, rng)
    anns = []
    for (r0, c0, ch, cw) in plant_cells:
        box_noise = rng.standard_normal(spec.dim)
        box_noise /= np.linalg.norm(box_noise)
        cell_noise = rng.standard_normal((ch, cw, spec.dim))
        cell_norms = np.linalg.norm(cell_noise, axis=2, keepdims=True)
        cell_noise /= cell_norms
        plant = (base_direction[None, None, :]
                 + spec.noise * box_noise[None, None, :]
                 + spec.noise * PER_CELL_NOISE_FRACTION * cell_noise)
        data[r0:r0 + ch, c0:c0 + cw, :] = plant
        box = PixelBox(c0 * ps, r0 * ps, (c0 + cw) * ps, (r0 + ch) * ps)
        anns.append(Annotation(box=box, class_id=class_id))

    proposals = [a.box for a in anns]
    if with_extras:
        for a in anns:
            for _ in range(spec.jitters_per_box):
                proposals.append(_jitter_box(a.box, rng, image_w, image_h))
        for _ in range(spec.distractors_per_image):
            w = rng.uniform(1.5 * ps, 4.0 * ps)
            h = rng.uniform(1.5 * ps, 4.0 * ps)
            x0 = rng.uniform(0.0, image_w - w)
            y0 = rng.uniform(0.0, image_h - h)
            proposals.append(PixelBox(x0, y0, x0 + w, y0 + h))

    fm = FeatureMap(grid_h=spec.grid_h, grid_w=spec.grid_w, dim=spec.dim,
                    patch_size=ps, image_h=image_h, image_w=image_w,
                    data=data.astype("<f4"))
    return fm, tuple(anns), tuple(proposals)


def _plant_rectangles(spec: FixtureSpec, rng: np.random.Generator):
    """Non-overlapping cell rectangles (r0, c0, h, w), rejection sampled."""
    max_side = max(2, min(4, spec.grid_h // 2, spec.grid_w // 2))
    placed = []
    for _ in range(spec.boxes_per_image):
        for _ in range(50):
            ch = int(rng.integers(2, max_side + 1))
            cw = int(rng.integers(2, max_side + 1))
            r0 = int(rng.integers(0, spec.grid_h - ch + 1))
            c0 = int(rng.integers(0, spec.grid_w - cw + 1))
            if all(r0 + ch <= pr or pr +ph <= r0 or c0 + cw <= pc or pc + pw <= c0
                   for (pr, pc, ph, pw) in placed):
                placed.append((r0, c0, ch, cw))
                break
    return placed


def _jitter_box(box: PixelBox, rng: np.random.Generator,
                image_w: float, image_h: float) -> PixelBox:
    """Shift/resize by up to ~25% of each side, clipped to the image."""
    dw, dh = box.width, box.height
    x0 = box.x_min + rng.uniform(-0.25, 0.25) * dw
    y0 = box.y_min + rng.uniform(-0.25, 0.25) * dh
    x1 = box.x_max + rng.uniform(-0.25, 0.25) * dw
    y1 = box.y_max + rng.uniform(-0.25, 0.25) * dh
    x0, x1 = min(x0, x1 - 1.0), max(x1, x0 + 1.0)
    y0, y1 = min(y0, y1 - 1.0), max(y1, y0 + 1.0)
    jittered = PixelBox(x0, y0, x1, y1).clip(image_w, image_h)
    return jittered if jittered is not None else box
