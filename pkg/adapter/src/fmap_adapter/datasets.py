"""Annotation sources: COCO-style JSON plus precomputed proposal files.

Rotated or polygonal regions are reduced to their axis-aligned envelopes
(the engine consumes axis-aligned boxes only).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field


@dataclass
class BoxAnnotation:
    box: list[float]  # [x_min, y_min, x_max, y_max]
    class_name: str


@dataclass
class ImageRecord:
    image_id: str
    file_name: str
    width: int
    height: int
    annotations: list[BoxAnnotation] = field(default_factory=list)

    def class_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for a in self.annotations:
            counts[a.class_name] = counts.get(a.class_name, 0) + 1
        return counts


def _xywh_to_xyxy(bbox):
    x, y, w, h = (float(v) for v in bbox)
    return [x, y, x + w, y + h]


def _polygon_envelope(segmentation):
    xs, ys = [], []
    for poly in segmentation:
        xs.extend(poly[0::2])
        ys.extend(poly[1::2])
    return [min(xs), min(ys), max(xs), max(ys)]


def load_coco(path: str) -> tuple[list[ImageRecord], list[str]]:
    """Read a COCO-style annotation file.

    Returns image records (in file order) and the ordered category names.
    """
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    categories = {int(c["id"]): str(c["name"]) for c in doc["categories"]}
    records: dict[str, ImageRecord] = {}
    order = []
    for im in doc["images"]:
        rec = ImageRecord(image_id=str(im["id"]), file_name=str(im["file_name"]),
                          width=int(im["width"]), height=int(im["height"]))
        records[rec.image_id] = rec
        order.append(rec.image_id)
    for ann in doc.get("annotations", ()):
        image_id = str(ann["image_id"])
        if image_id not in records:
            continue
        cat = categories.get(int(ann["category_id"]))
        if cat is None:
            continue
        if ann.get("bbox"):
            box = _xywh_to_xyxy(ann["bbox"])
        elif ann.get("segmentation"):
            box = _polygon_envelope(ann["segmentation"])
        else:
            continue
        records[image_id].annotations.append(BoxAnnotation(box, cat))
    return [records[i] for i in order], [categories[k] for k in sorted(categories)]


def load_proposals(path: str) -> dict[str, list[list[float]]]:
    """Precomputed proposals: {"<image_id>": [[x0, y0, x1, y1], ...]}."""
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    return {str(k): [[float(x) for x in box] for box in v]
            for k, v in doc.items()}
