"""Inference pipeline: similarity maps, box-averaged scoring, NMS.

Per grid cell, the similarity map holds the cosine between the (normalized)
patch feature and every prototype row. A proposal's score vector is the
area-weighted mean of those similarities over its footprint, which equals the
pixel-level average over a nearest-neighbor-upsampled map at patch_size**2
less memory. The proposal is labeled by the argmax row; proposals won by a
background row are discarded, then per-class NMS runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import box_to_cell_weights, nms
from .types import ClassTable, Detection, FeatureMap, PixelBox, PrototypeSet

SCORE_RAW = "raw"
SCORE_MARGIN = "margin"


@dataclass
class SimilarityMap:
    """(grid_h, grid_w, J+K) cosine similarities plus the grid geometry."""

    values: np.ndarray
    patch_size: int
    image_h: int
    image_w: int

    @property
    def grid_h(self) -> int:
        return int(self.values.shape[0])

    @property
    def grid_w(self) -> int:
        return int(self.values.shape[1])


def similarity_map(fm: FeatureMap, protos: PrototypeSet) -> SimilarityMap:
    """Cosine similarity of every patch feature against every prototype row.

    Prototype rows are unit-norm by invariant, so only features are normalized
    here; zero-norm features score 0 for all rows.
    """
    if fm.dim != protos.dim:
        raise ValueError(f"feature dim {fm.dim} != prototype dim {protos.dim}")
    flat = fm.data.astype(np.float64).reshape(-1, fm.dim)
    norms = np.linalg.norm(flat, axis=1)
    safe = np.where(norms > 0.0, norms, 1.0)
    normalized = flat / safe[:, None]
    sims = normalized @ protos.vectors.astype(np.float64).T
    sims[norms == 0.0] = 0.0
    return SimilarityMap(values=sims.reshape(fm.grid_h, fm.grid_w, -1),
                         patch_size=fm.patch_size,
                         image_h=fm.image_h, image_w=fm.image_w)


def score_box(sim: SimilarityMap, box: PixelBox) -> np.ndarray:
    """Area-weighted mean similarity per prototype row over a box footprint."""
    wm = box_to_cell_weights(box, sim)
    cells = sim.values[wm.rows, wm.cols]
    return (wm.weights[:, None] * cells).sum(axis=0) / wm.weights.sum()


def classify_proposal(scores: np.ndarray,
                      class_table: ClassTable) -> Optional[tuple[int, float]]:
    """Argmax over all rows; None when a background row wins.

    Ties break toward the lowest row index.
    """
    if scores.shape[0] != class_table.num_rows:
        raise ValueError(f"{scores.shape[0]} scores != {class_table.num_rows} rows")
    row = int(np.argmax(scores))
    if class_table.is_background_row(row):
        return None
    return row, float(scores[row])


def detect_image(fm: FeatureMap, proposals: list[PixelBox], protos: PrototypeSet,
                 nms_iou: float = 0.5, score_mode: str = SCORE_RAW,
                 nms_class_agnostic: bool = False) -> list[Detection]:
    """Classify proposals against prototypes and suppress duplicates.

    score_mode "raw" ranks by the winning class's average similarity;
    "margin" subtracts the best background average from it. NMS is per-class
    unless nms_class_agnostic.
    """
    if score_mode not in (SCORE_RAW, SCORE_MARGIN):
        raise ValueError(f"unknown score mode {score_mode!r}")
    sim = similarity_map(fm, protos)
    j = protos.class_table.num_objects
    detections: list[Detection] = []
    for box in proposals:
        scores = score_box(sim, box)
        verdict = classify_proposal(scores, protos.class_table)
        if verdict is None:
            continue
        class_id, score = verdict
        if score_mode == SCORE_MARGIN and scores.shape[0] > j:
            score -= float(scores[j:].max())
        detections.append(Detection(box=box, class_id=class_id, score=score))
    return nms(detections, iou_threshold=nms_iou,
               class_agnostic=nms_class_agnostic)
