"""Box arithmetic shared by pooling, sampling, NMS and evaluation.

The patch grid realizes pixel-level box averages without upsampling: the
weight of a grid cell is the fraction of its pixel footprint covered by the
box, which makes an area-weighted cell average exactly equal to the mean of a
nearest-neighbor-upsampled map over the box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .types import Detection, PixelBox


def iou(a: PixelBox, b: PixelBox) -> float:
    """Intersection over union of two boxes; 0.0 when disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


@dataclass
class OverlapWeightMap:
    """Sparse cell weights for one box: weight = covered fraction of the cell.

    Invariant: sum(weights) * patch_size**2 equals the clipped box area.
    """

    rows: np.ndarray     # int cell rows
    cols: np.ndarray     # int cell cols
    weights: np.ndarray  # float64 in (0, 1]

    def cells(self):
        return zip(self.rows.tolist(), self.cols.tolist(), self.weights.tolist())


def box_to_cell_weights(box: PixelBox, fm) -> OverlapWeightMap:
    """Fractional-area weights of the grid cells a box covers.

    `fm` is anything with grid_h, grid_w, patch_size, image_h, image_w
    (a FeatureMap or a SimilarityMap). The box is clipped to the image first;
    a box whose clipped area is zero is an error.
    """
    clipped = box.clip(fm.image_w, fm.image_h)
    if clipped is None:
        raise ValueError(f"degenerate box: {box} has no area inside the image")
    ps = float(fm.patch_size)
    c0 = max(int(np.floor(clipped.x_min / ps)), 0)
    c1 = min(int(np.ceil(clipped.x_max / ps)), fm.grid_w)
    r0 = max(int(np.floor(clipped.y_min / ps)), 0)
    r1 = min(int(np.ceil(clipped.y_max / ps)), fm.grid_h)

    cols = np.arange(c0, c1)
    rows = np.arange(r0, r1)
    ov_x = np.minimum((cols + 1) * ps, clipped.x_max) - np.maximum(cols * ps, clipped.x_min)
    ov_y = np.minimum((rows + 1) * ps, clipped.y_max) - np.maximum(rows * ps, clipped.y_min)
    ov_x = np.clip(ov_x, 0.0, None)
    ov_y = np.clip(ov_y, 0.0, None)
    w = np.outer(ov_y, ov_x) / (ps * ps)

    rr, cc = np.nonzero(w > 0.0)
    if rr.size == 0:
        # Numerical corner case: fall back to the cell holding the box center.
        cx = 0.5 * (clipped.x_min + clipped.x_max)
        cy = 0.5 * (clipped.y_min + clipped.y_max)
        c = min(int(cx // ps), fm.grid_w - 1)
        r = min(int(cy // ps), fm.grid_h - 1)
        return OverlapWeightMap(np.array([r]), np.array([c]), np.array([1.0]))
    return OverlapWeightMap(rows[rr], cols[cc], w[rr, cc])


def nms(detections: list[Detection], iou_threshold: float = 0.5,
        class_agnostic: bool = False) -> list[Detection]:
    """Greedy non-maximum suppression, per class unless `class_agnostic`.

    Detections are visited in descending score order (ties: smaller box area,
    then input order); one is kept iff its IoU with every already-kept
    detection of the same class is below the threshold. Output is in kept
    order, so nms is idempotent.
    """
    order = sorted(range(len(detections)),
                   key=lambda i: (-detections[i].score, detections[i].box.area, i))
    kept: list[Detection] = []
    for i in order:
        d = detections[i]
        suppressed = False
        for k in kept:
            if not class_agnostic and k.class_id != d.class_id:
                continue
            if iou(d.box, k.box) >= iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(d)
    return kept
