"""Prototype construction: box pooling, class averaging, background clustering.

Object prototypes are per-box area-weighted feature means, averaged over all
examples of a class and L2-normalized (equal weight per example). Background
prototypes are K-Means centroids of embeddings pooled from object-free crops.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import box_to_cell_weights
from .io import load_entry_features
from .types import (
    DatasetManifest,
    FeatureMap,
    PixelBox,
    PrototypeSet,
    PROVENANCE_AVERAGED,
    mask_extent,
    normalize_rows,
)

log = logging.getLogger(__name__)

DEFAULT_BACKGROUND_K = 200
DEFAULT_CROPS_PER_IMAGE = 10
MAX_CROP_ATTEMPTS = 50


@dataclass
class CropSample:
    """Object-free crop: its box has zero pixel overlap with every annotation."""

    image_id: str
    box: PixelBox
    embedding: np.ndarray  # (D,) float64


@dataclass
class KMeansResult:
    centroids: np.ndarray      # (k, D) float64
    assignments: np.ndarray    # (N,) int, nearest-centroid index per point
    inertia: float             # sum of squared distances to assigned centroids
    inertia_history: list[float] = field(default_factory=list)


def pool_box_embedding(fm: FeatureMap, box: PixelBox,
                       mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Area-weighted mean of the patch embeddings under a box.

    Cell weights are the fraction of each cell's pixel footprint the box
    covers; with a mask, they are reweighted by the masked-foreground area in
    the cell. A mask with zero foreground overlap falls back to box-only
    pooling with a warning.
    """
    wm = box_to_cell_weights(box, fm)
    weights = wm.weights
    if mask is not None:
        fg = mask_cell_weights(box, mask, fm)
        masked = fg[wm.rows, wm.cols]
        if masked.sum() > 0.0:
            weights = masked
        else:
            log.warning("mask has no foreground overlap with box %s; "
                        "falling back to box-only pooling", box.as_list())
    cells = fm.data[wm.rows, wm.cols].astype(np.float64)
    return (weights[:, None] * cells).sum(axis=0) / weights.sum()


def mask_cell_weights(box: PixelBox, mask: np.ndarray, fm: FeatureMap) -> np.ndarray:
    """Per-cell masked-foreground area divided by patch_size**2.

    Mask pixel (i, j) is the unit square anchored at
    (floor(x_min)+j, floor(y_min)+i); its contribution is its overlap area
    with the clipped box. Pixels lie on the integer lattice, so each falls in
    exactly one grid cell.
    """
    clipped = box.clip(fm.image_w, fm.image_h)
    if clipped is None:
        raise ValueError(f"degenerate box: {box}")
    ax, ay, mw, mh = mask_extent(box)
    m = np.asarray(mask, dtype=bool)
    if m.shape != (mh, mw):
        raise ValueError(f"mask shape {m.shape} does not match box extent ({mh}, {mw})")

    ii, jj = np.nonzero(m)
    px = ax + jj  # absolute pixel columns
    py = ay + ii
    cov_x = np.clip(np.minimum(px + 1, clipped.x_max) - np.maximum(px, clipped.x_min),
                    0.0, None)
    cov_y = np.clip(np.minimum(py + 1, clipped.y_max) - np.maximum(py, clipped.y_min),
                    0.0, None)
    area = cov_x * cov_y

    ps = fm.patch_size
    out = np.zeros((fm.grid_h, fm.grid_w), dtype=np.float64)
    rows = np.clip(py // ps, 0, fm.grid_h - 1)
    cols = np.clip(px // ps, 0, fm.grid_w - 1)
    np.add.at(out, (rows, cols), area)
    return out / (ps * ps)


def build_object_prototypes(manifest: DatasetManifest, use_masks: bool = False,
                            temperature: float = 0.1) -> PrototypeSet:
    """Mean of pooled box embeddings per class, L2-normalized (object rows only).

    Every object class must have at least one annotation; a zero-norm class
    mean is an error.
    """
    table = manifest.class_table
    j = table.num_objects
    if j < 1:
        raise ValueError("class table has no object classes")

    sums: Optional[np.ndarray] = None
    counts = np.zeros(j, dtype=np.int64)
    for entry in manifest.entries:
        if not entry.annotations:
            continue
        fm = load_entry_features(manifest, entry)
        if sums is None:
            sums = np.zeros((j, fm.dim), dtype=np.float64)
        elif sums.shape[1] != fm.dim:
            raise ValueError(f"feature dim {fm.dim} of {entry.image_id!r} "
                             f"differs from {sums.shape[1]}")
        for ann in entry.annotations:
            if not (0 <= ann.class_id < j):
                raise ValueError(f"entry {entry.image_id!r}: unresolved class "
                                 f"{ann.class_name!r}")
            emb = pool_box_embedding(fm, ann.box,
                                     ann.mask if use_masks else None)
            sums[ann.class_id] += emb
            counts[ann.class_id] += 1

    missing = [table.object_classes[i].name for i in range(j) if counts[i] == 0]
    if missing:
        raise ValueError(f"no annotations for class(es): {', '.join(missing)}")
    assert sums is not None
    means = sums / counts[:, None]
    norms = np.linalg.norm(means, axis=1)
    if np.any(norms == 0.0):
        bad = table.object_classes[int(np.argmin(norms))].name
        raise ValueError(f"degenerate prototype for class {bad!r} (zero-norm mean)")
    vectors = (means / norms[:, None]).astype("<f4")
    return PrototypeSet(class_table=table.with_background_count(0),
                        vectors=vectors, temperature=temperature,
                        provenance=PROVENANCE_AVERAGED)


# ---------------------------------------------------------------------------
# Background crops and clustering


def annotation_size_range(manifest: DatasetManifest
                          ) -> tuple[tuple[float, float], tuple[float, float]]:
    """Empirical (width, height) ranges of the manifest's annotations.

    Falls back to [patch-sized .. quarter-image] when the manifest has no
    annotations at all.
    """
    widths, heights = [], []
    for e in manifest.entries:
        for a in e.annotations:
            widths.append(a.box.width)
            heights.append(a.box.height)
    if widths:
        return (min(widths), max(widths)), (min(heights), max(heights))
    w = min(e.image_w for e in manifest.entries)
    h = min(e.image_h for e in manifest.entries)
    return (1.0, max(1.0, w / 4)), (1.0, max(1.0, h / 4))


def sample_nonoverlapping_boxes(rng: np.random.Generator, image_w: float,
                                image_h: float, blocked: list[PixelBox],
                                count: int,
                                size_range: tuple[tuple[float, float],
                                                  tuple[float, float]],
                                max_attempts: int = MAX_CROP_ATTEMPTS
                                ) -> list[PixelBox]:
    """Rejection-sample boxes with zero pixel intersection with `blocked`.

    Up to `max_attempts` draws per box; fewer than `count` boxes may be
    returned. Half-open boxes may share edges with blocked boxes.
    """
    (w_lo, w_hi), (h_lo, h_hi) = size_range
    w_lo, w_hi = min(w_lo, image_w), min(w_hi, image_w)
    h_lo, h_hi = min(h_lo, image_h), min(h_hi, image_h)
    out: list[PixelBox] = []
    for _ in range(count):
        for _ in range(max_attempts):
            w = rng.uniform(w_lo, w_hi)
            h = rng.uniform(h_lo, h_hi)
            x0 = rng.uniform(0.0, image_w - w)
            y0 = rng.uniform(0.0, image_h - h)
            box = PixelBox(x0, y0, x0 + w, y0 + h)
            if all(_intersection_area(box, b) == 0.0 for b in blocked):
                out.append(box)
                break
    return out


def _intersection_area(a: PixelBox, b: PixelBox) -> float:
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    return max(ix, 0.0) * max(iy, 0.0)


def sample_background_crops(manifest: DatasetManifest,
                            crops_per_image: int = DEFAULT_CROPS_PER_IMAGE,
                            seed: int = 0) -> list[CropSample]:
    """Object-free crops per image, pooled into embeddings.

    Crop sizes are drawn uniformly from the manifest's annotation size range;
    an image so covered by annotations that rejection sampling fails just
    contributes fewer (possibly zero) crops.
    """
    rng = np.random.default_rng(seed)
    size_range = annotation_size_range(manifest)
    crops: list[CropSample] = []
    for entry in manifest.entries:
        blocked = [a.box for a in entry.annotations]
        boxes = sample_nonoverlapping_boxes(rng, entry.image_w, entry.image_h,
                                            blocked, crops_per_image, size_range)
        if not boxes:
            log.warning("no object-free crops found for image %r", entry.image_id)
            continue
        fm = load_entry_features(manifest, entry)
        for box in boxes:
            crops.append(CropSample(image_id=entry.image_id, box=box,
                                    embedding=pool_box_embedding(fm, box)))
    return crops


def kmeans(embeddings, k: int, seed: int = 0, max_iters: int = 100,
           tol: float = 1e-5) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Stops when the max centroid displacement drops below `tol` or assignments
    stop changing. Empty clusters are re-seeded from the point currently
    farthest from its centroid. k is reduced to the number of points when the
    data cannot fill k clusters.
    """
    points = np.asarray(embeddings, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 1:
        raise ValueError("kmeans needs at least one embedding")
    if k < 1:
        raise ValueError("k must be >= 1")
    n = points.shape[0]
    if k > n:
        log.warning("k=%d exceeds %d points; reducing k", k, n)
        k = n

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(points, k, rng)
    labels, dists = _assign(points, centroids)
    history = [float(dists.sum())]

    for _ in range(max_iters):
        new_centroids = centroids.copy()
        taken: set[int] = set()
        for c in range(k):
            members = labels == c
            if members.any():
                new_centroids[c] = points[members].mean(axis=0)
            else:
                far = _farthest_point(dists, taken)
                taken.add(far)
                new_centroids[c] = points[far]
        shift = float(np.linalg.norm(new_centroids - centroids, axis=1).max())
        centroids = new_centroids
        new_labels, dists = _assign(points, centroids)
        history.append(float(dists.sum()))
        converged = shift < tol or np.array_equal(new_labels, labels)
        labels = new_labels
        if converged:
            break

    return KMeansResult(centroids=centroids, assignments=labels,
                        inertia=history[-1], inertia_history=history)


def _assign(points: np.ndarray, centroids: np.ndarray):
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(points.shape[0]), labels]


def _farthest_point(dists: np.ndarray, taken: set[int]) -> int:
    order = np.argsort(-dists, kind="stable")
    for idx in order:
        if int(idx) not in taken:
            return int(idx)
    return int(order[0])


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(0, n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total > 0.0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(0, n)
        centroids[i] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def build_background_prototypes(crops: list[CropSample],
                                k: int = DEFAULT_BACKGROUND_K,
                                seed: int = 0) -> np.ndarray:
    """Cluster crop embeddings and normalize each centroid into one row.

    Returns a (K', D) float32 matrix with K' <= k (reduced when there are
    fewer crops than requested clusters).
    """
    if not crops:
        raise ValueError("no background crops to cluster")
    embeddings = np.stack([c.embedding for c in crops]).astype(np.float64)
    result = kmeans(embeddings, k, seed=seed)
    return normalize_rows(result.centroids).astype("<f4")


def with_background(protos: PrototypeSet, background_rows: np.ndarray) -> PrototypeSet:
    """New PrototypeSet with `background_rows` appended after the object rows."""
    rows = np.asarray(background_rows, dtype="<f4")
    if rows.ndim != 2 or rows.shape[1] != protos.dim:
        raise ValueError(f"background rows must be (K, {protos.dim})")
    table = protos.class_table.with_background_count(rows.shape[0])
    vectors = np.vstack([protos.object_rows().astype("<f4"), rows])
    return PrototypeSet(class_table=table, vectors=vectors,
                        temperature=protos.temperature,
                        provenance=protos.provenance)
