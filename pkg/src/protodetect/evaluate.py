"""Detection (mAP50) and classification-only evaluation.

Detection AP follows the PASCAL VOC protocol at a fixed IoU threshold:
per class, detections are sorted by score, greedily matched one-to-one to
ground-truth boxes (highest IoU wins, ties by ground-truth index), and AP is
the area under the precision envelope over recall (all-point interpolation;
an 11-point variant is available for comparison with legacy numbers).

Classification-only evaluation scores every ground-truth box as if it were a
proposal; a box won by a background row counts as a misclassification of its
class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .classify import score_box, similarity_map
from .geometry import box_to_cell_weights, iou
from .io import load_entry_features
from .prototypes import mask_cell_weights
from .types import DatasetManifest, Detection, PrototypeSet, ROLE_BASE, ROLE_NOVEL

CLASSES_ALL = "all"
CLASSES_NOVEL = "novel"
CLASSES_BASE = "base"


@dataclass
class EvalReport:
    per_class_ap: dict[str, float | None]  # None when the class has no GT
    map_value: float
    counts: dict[str, dict[str, int]]      # per class: tp, fp, fn, n_gt
    class_filter: list[str]
    iou_threshold: float
    interpolation: str

    def to_dict(self) -> dict:
        return {
            "map": self.map_value,
            "per_class_ap": self.per_class_ap,
            "counts": self.counts,
            "config": {
                "classes": self.class_filter,
                "iou_threshold": self.iou_threshold,
                "interpolation": self.interpolation,
            },
        }


@dataclass
class ClassificationReport:
    macro_f1: float
    accuracy: float
    per_class: dict[str, dict[str, float]]  # precision, recall, f1, support
    confusion: np.ndarray                   # (J, J+K): true class x predicted row
    row_labels: list[str] = field(default_factory=list)
    n_boxes: int = 0

    def to_dict(self) -> dict:
        return {
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
            "per_class": self.per_class,
            "confusion": self.confusion.tolist(),
            "confusion_columns": self.row_labels,
            "n_boxes": self.n_boxes,
        }


def resolve_class_filter(manifest: DatasetManifest, class_filter) -> list[str]:
    """Map "novel"/"base"/"all" or an explicit name list to class names."""
    table = manifest.class_table
    if isinstance(class_filter, str):
        if class_filter == CLASSES_ALL:
            names = table.names()
        elif class_filter in (CLASSES_NOVEL, CLASSES_BASE):
            role = ROLE_NOVEL if class_filter == CLASSES_NOVEL else ROLE_BASE
            names = table.names_with_role(role)
        else:
            raise ValueError(f"unknown class filter {class_filter!r}")
    else:
        names = list(class_filter)
        unknown = [n for n in names if table.index_of(n) is None]
        if unknown:
            raise ValueError(f"unknown class(es) in filter: {unknown}")
    if not names:
        raise ValueError(f"class filter {class_filter!r} selects no classes")
    return names


def evaluate_detections(detections: dict[str, list[Detection]],
                        manifest: DatasetManifest, iou_thr: float = 0.5,
                        class_filter="all", voc11: bool = False) -> EvalReport:
    """Per-class AP at the given IoU threshold and their mean over the filter.

    `detections` maps image_id to that image's detections (class ids indexed
    against the manifest's class table). Classes without any ground truth are
    reported with AP None and excluded from the mean.
    """
    names = resolve_class_filter(manifest, class_filter)
    table = manifest.class_table
    per_class_ap: dict[str, float | None] = {}
    counts: dict[str, dict[str, int]] = {}

    for name in names:
        class_id = table.index_of(name)
        gt_boxes = {e.image_id: [a.box for a in e.annotations
                                 if a.class_id == class_id]
                    for e in manifest.entries}
        n_gt = sum(len(v) for v in gt_boxes.values())
        dets = [(e.image_id, d)
                for e in manifest.entries
                for d in detections.get(e.image_id, [])
                if d.class_id == class_id]
        dets.sort(key=lambda t: -t[1].score)

        tp = np.zeros(len(dets))
        fp = np.zeros(len(dets))
        matched: dict[str, set[int]] = {iid: set() for iid in gt_boxes}
        for i, (image_id, det) in enumerate(dets):
            candidates = gt_boxes.get(image_id, [])
            best_iou, best_j = 0.0, -1
            for jdx, gt in enumerate(candidates):
                if jdx in matched[image_id]:
                    continue
                value = iou(det.box, gt)
                if value > best_iou:  # strict: IoU ties keep the lower GT index
                    best_iou, best_j = value, jdx
            if best_j >= 0 and best_iou >= iou_thr:
                matched[image_id].add(best_j)
                tp[i] = 1.0
            else:
                fp[i] = 1.0

        n_tp = int(tp.sum())
        counts[name] = {"tp": n_tp, "fp": int(fp.sum()),
                        "fn": n_gt - n_tp, "n_gt": n_gt}
        if n_gt == 0:
            per_class_ap[name] = None
            continue
        cum_tp = np.cumsum(tp)
        cum_fp = np.cumsum(fp)
        recall = cum_tp / n_gt
        precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
        per_class_ap[name] = (_voc11_ap(recall, precision) if voc11
                              else _all_point_ap(recall, precision))

    included = [v for v in per_class_ap.values() if v is not None]
    map_value = float(np.mean(included)) if included else 0.0
    return EvalReport(per_class_ap=per_class_ap, map_value=map_value,
                      counts=counts, class_filter=names, iou_threshold=iou_thr,
                      interpolation="voc11" if voc11 else "all_point")


def _all_point_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the precision envelope over recall."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(((mrec[changed] - mrec[changed - 1]) * mpre[changed]).sum())


def _voc11_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    ap = 0.0
    for t in np.linspace(0.0, 1.0, 11):
        mask = recall >= t
        ap += float(precision[mask].max()) if mask.any() else 0.0
    return ap / 11.0


def _masked_score_box(fm, sim, box, mask) -> np.ndarray:
    """score_box, optionally reweighting cells by masked-foreground area."""
    if mask is None:
        return score_box(sim, box)
    wm = box_to_cell_weights(box, sim)
    fg = mask_cell_weights(box, mask, fm)
    weights = fg[wm.rows, wm.cols]
    if weights.sum() <= 0.0:
        return score_box(sim, box)
    cells = sim.values[wm.rows, wm.cols]
    return (weights[:, None] * cells).sum(axis=0) / weights.sum()


def evaluate_classification(manifest: DatasetManifest, protos: PrototypeSet,
                            use_masks: bool = False) -> ClassificationReport:
    """Classify every ground-truth box and tabulate a (J, J+K) confusion matrix.

    Macro F-1 is averaged over object classes; a background prediction is an
    error for its true class (and never a prediction of any object class).
    """
    if manifest.class_table.names() != protos.class_table.names():
        raise ValueError("manifest and prototype class tables disagree")
    j = protos.class_table.num_objects
    rows = protos.class_table.num_rows
    confusion = np.zeros((j, rows), dtype=np.int64)

    for entry in manifest.entries:
        if not entry.annotations:
            continue
        fm = load_entry_features(manifest, entry)
        sim = similarity_map(fm, protos)
        for ann in entry.annotations:
            if not (0 <= ann.class_id < j):
                raise ValueError(f"entry {entry.image_id!r}: unresolved class")
            mask = ann.mask if use_masks else None
            scores = _masked_score_box(fm, sim, ann.box, mask)
            pred = int(np.argmax(scores))
            confusion[ann.class_id, pred] += 1

    total = int(confusion.sum())
    if total == 0:
        raise ValueError("manifest has no annotations to classify")
    accuracy = float(np.trace(confusion[:, :j]) / total)
    per_class: dict[str, dict[str, float]] = {}
    f1s = []
    for c in range(j):
        tp = float(confusion[c, c])
        pred_c = float(confusion[:, c].sum())
        true_c = float(confusion[c, :].sum())
        precision = tp / pred_c if pred_c > 0 else 0.0
        recall = tp / true_c if true_c > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        f1s.append(f1)
        per_class[protos.class_table.object_classes[c].name] = {
            "precision": precision, "recall": recall, "f1": f1,
            "support": true_c,
        }
    return ClassificationReport(
        macro_f1=float(np.mean(f1s)), accuracy=accuracy, per_class=per_class,
        confusion=confusion,
        row_labels=[protos.class_table.row_label(r) for r in range(rows)],
        n_boxes=total)
