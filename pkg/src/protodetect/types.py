"""Core data model: feature maps, boxes, annotations, class tables, prototypes.

Boxes use continuous pixel coordinates with half-open semantics
[x_min, x_max) x [y_min, y_max); area = (x_max - x_min) * (y_max - y_min).
Class identity is by name in files and by dense index in memory; the
ClassTable is the single mapping authority (object classes first, then
background clusters).

All types are treated as immutable after construction: derived values are
produced by building new instances, never by mutating in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

ROLE_BASE = "base"
ROLE_NOVEL = "novel"
SPLIT_TRAIN_SHOTS = "train_shots"
SPLIT_TEST = "test"

PROVENANCE_AVERAGED = "averaged"
PROVENANCE_FINETUNED = "finetuned"

UNKNOWN_CLASS_ID = -1


@dataclass(frozen=True)
class PixelBox:
    """Axis-aligned box in image pixel coordinates, half-open on both axes."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def is_degenerate(self) -> bool:
        return not (self.x_min < self.x_max and self.y_min < self.y_max)

    def clip(self, image_w: float, image_h: float) -> Optional["PixelBox"]:
        """Clip to the image rectangle; None when the intersection is empty."""
        x0 = max(self.x_min, 0.0)
        y0 = max(self.y_min, 0.0)
        x1 = min(self.x_max, float(image_w))
        y1 = min(self.y_max, float(image_h))
        if x0 >= x1 or y0 >= y1:
            return None
        return PixelBox(x0, y0, x1, y1)

    def shifted(self, dx: float, dy: float) -> "PixelBox":
        return PixelBox(self.x_min + dx, self.y_min + dy,
                        self.x_max + dx, self.y_max + dy)

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


def mask_extent(box: PixelBox) -> tuple[int, int, int, int]:
    """Integer pixel extent a mask for `box` must cover.

    Returns (anchor_x, anchor_y, width, height): the mask grid is anchored at
    (floor(x_min), floor(y_min)) and spans whole pixels up to ceil(x_max/y_max).
    """
    ax = math.floor(box.x_min)
    ay = math.floor(box.y_min)
    w = math.ceil(box.x_max) - ax
    h = math.ceil(box.y_max) - ay
    return ax, ay, w, h


@dataclass(frozen=True)
class ObjectClass:
    name: str
    role: str  # ROLE_BASE | ROLE_NOVEL


@dataclass(frozen=True)
class ClassTable:
    """Ordered object classes plus the number of background clusters.

    Prototype row order is object classes (dense indices 0..J-1) followed by
    background clusters (J..J+K-1).
    """

    object_classes: tuple[ObjectClass, ...]
    background_count: int = 0

    @property
    def num_objects(self) -> int:
        return len(self.object_classes)

    @property
    def num_rows(self) -> int:
        return self.num_objects + self.background_count

    def names(self) -> list[str]:
        return [c.name for c in self.object_classes]

    def index_of(self, name: str) -> Optional[int]:
        for i, c in enumerate(self.object_classes):
            if c.name == name:
                return i
        return None

    def is_background_row(self, row: int) -> bool:
        return row >= self.num_objects

    def row_label(self, row: int) -> str:
        if row < self.num_objects:
            return self.object_classes[row].name
        return f"background_{row - self.num_objects}"

    def names_with_role(self, role: str) -> list[str]:
        return [c.name for c in self.object_classes if c.role == role]

    def with_background_count(self, k: int) -> "ClassTable":
        return ClassTable(self.object_classes, k)

    def check(self) -> list[str]:
        problems = []
        if self.num_objects < 1:
            problems.append("class table has no object classes")
        names = self.names()
        if len(set(names)) != len(names):
            problems.append("class names are not unique")
        if self.background_count < 0:
            problems.append("background_count is negative")
        for c in self.object_classes:
            if c.role not in (ROLE_BASE, ROLE_NOVEL):
                problems.append(f"class {c.name!r} has invalid role {c.role!r}")
        return problems


class Annotation:
    """Ground-truth box with a class and an optional binary mask.

    `class_id` indexes an object class of the governing ClassTable; it is
    UNKNOWN_CLASS_ID when the source file referenced a name absent from the
    table (kept so validation can report it; `class_name` preserves the raw
    name in that case).
    """

    __slots__ = ("box", "class_id", "mask", "class_name")

    def __init__(self, box: PixelBox, class_id: int,
                 mask: Optional[np.ndarray] = None,
                 class_name: Optional[str] = None):
        self.box = box
        self.class_id = class_id
        self.mask = None if mask is None else np.asarray(mask, dtype=bool)
        self.class_name = class_name

    def __eq__(self, other):
        if not isinstance(other, Annotation):
            return NotImplemented
        if self.box != other.box or self.class_id != other.class_id:
            return False
        if self.class_name != other.class_name:
            return False
        if (self.mask is None) != (other.mask is None):
            return False
        return self.mask is None or np.array_equal(self.mask, other.mask)

    def __repr__(self):
        return (f"Annotation(box={self.box}, class_id={self.class_id}, "
                f"mask={'yes' if self.mask is not None else 'no'})")


@dataclass(frozen=True)
class Detection:
    """Classified, scored proposal; never carries a background class."""

    box: PixelBox
    class_id: int
    score: float


@dataclass
class FeatureMap:
    """Dense grid of per-patch embedding vectors for one image.

    `data` has shape (grid_h, grid_w, dim); cell (r, c) covers the pixel
    footprint [c*patch_size, (c+1)*patch_size) x [r*patch_size, (r+1)*patch_size).
    The grid tiles the image with ceiling division: grid_h*patch_size >= image_h
    and (grid_h-1)*patch_size < image_h (same for width).
    """

    grid_h: int
    grid_w: int
    dim: int
    patch_size: int
    image_h: int
    image_w: int
    data: np.ndarray

    def check(self) -> list[str]:
        problems = []
        if self.dim < 1:
            problems.append("dim must be >= 1")
        if self.patch_size < 1:
            problems.append("patch_size must be >= 1")
        for label, grid, img in (("height", self.grid_h, self.image_h),
                                 ("width", self.grid_w, self.image_w)):
            if grid * self.patch_size < img or (grid - 1) * self.patch_size >= img:
                problems.append(
                    f"grid {label} {grid} does not tile image {label} {img} "
                    f"with patch size {self.patch_size}")
        if self.data.shape != (self.grid_h, self.grid_w, self.dim):
            problems.append(
                f"data shape {self.data.shape} != "
                f"({self.grid_h}, {self.grid_w}, {self.dim})")
        elif not np.isfinite(self.data).all():
            problems.append("feature values contain NaN or infinity")
        return problems


@dataclass
class PrototypeSet:
    """Unit-norm reference vectors: object classes first, then backgrounds.

    Rows are L2-normalized when built ("normalize on write"); files store the
    normalized float32 form verbatim so round-trips are bit-exact.
    """

    class_table: ClassTable
    vectors: np.ndarray  # (J+K, D) float32, unit rows
    temperature: float = 0.1
    provenance: str = PROVENANCE_AVERAGED

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    @property
    def num_rows(self) -> int:
        return int(self.vectors.shape[0])

    def object_rows(self) -> np.ndarray:
        return self.vectors[: self.class_table.num_objects]

    def background_rows(self) -> np.ndarray:
        return self.vectors[self.class_table.num_objects:]

    def row_labels(self) -> list[str]:
        return [self.class_table.row_label(i) for i in range(self.num_rows)]

    def check(self) -> list[str]:
        problems = self.class_table.check()
        if self.vectors.ndim != 2:
            problems.append("vectors must be a 2-D matrix")
            return problems
        if self.vectors.shape[0] != self.class_table.num_rows:
            problems.append(
                f"{self.vectors.shape[0]} rows != class table "
                f"{self.class_table.num_rows}")
        norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
        if norms.size and np.abs(norms - 1.0).max() > 1e-6:
            problems.append("prototype rows are not unit-norm")
        if self.temperature <= 0:
            problems.append("temperature must be positive")
        if self.provenance not in (PROVENANCE_AVERAGED, PROVENANCE_FINETUNED):
            problems.append(f"invalid provenance {self.provenance!r}")
        return problems

    def __eq__(self, other):
        if not isinstance(other, PrototypeSet):
            return NotImplemented
        return (self.class_table == other.class_table
                and self.temperature == other.temperature
                and self.provenance == other.provenance
                and self.vectors.dtype == other.vectors.dtype
                and np.array_equal(self.vectors, other.vectors))


@dataclass
class ManifestEntry:
    image_id: str
    feature_file: str  # as written in the manifest; resolved against base_dir
    image_h: int
    image_w: int
    annotations: tuple[Annotation, ...] = ()
    proposals: tuple[PixelBox, ...] = ()
    # photometric-variant feature files (same geometry); training picks one
    # of [feature_file, *feature_variants] uniformly per epoch when present
    feature_variants: tuple[str, ...] = ()


@dataclass
class DatasetManifest:
    """Index binding images, feature files, annotations and proposals.

    `base_dir` is where the manifest was loaded from (used to resolve relative
    feature paths); it is bookkeeping, not part of the value.
    """

    entries: tuple[ManifestEntry, ...]
    class_table: ClassTable
    split_role: str = SPLIT_TEST
    base_dir: Optional[str] = field(default=None, compare=False)


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """L2-normalize rows in float64; raises on a zero-norm row."""
    m = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms == 0.0):
        bad = int(np.nonzero(norms == 0.0)[0][0])
        raise ValueError(f"degenerate prototype: row {bad} has zero norm")
    return m / norms[:, None]
