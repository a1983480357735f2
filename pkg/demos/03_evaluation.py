"""Evaluation protocols: detection mAP50 and classification-only scoring.

Shows greedy IoU matching, the precision envelope behind all-point AP, the
11-point legacy variant, per-class breakdowns by base/novel role, and the
classification confusion matrix.

Run: python demos/03_evaluation.py
"""

import tempfile

import numpy as np

import protodetect as pd
from protodetect import Annotation, Detection, PixelBox

# Hand-built miniature scenario first: one class, three GT boxes, four
# detections with one duplicate and one miss.
table = pd.ClassTable((pd.ObjectClass("ship", "novel"),), 0)
gt = [PixelBox(0, 0, 10, 10), PixelBox(20, 20, 30, 30), PixelBox(40, 0, 50, 10)]
entries = (pd.ManifestEntry("harbor", "unused", 60, 60,
                            tuple(Annotation(b, 0) for b in gt), ()),)
manifest = pd.DatasetManifest(entries, table, "test")

detections = {"harbor": [
    Detection(PixelBox(0, 0, 10, 10), 0, 0.95),    # hit
    Detection(PixelBox(1, 0, 11, 10), 0, 0.90),    # duplicate -> FP
    Detection(PixelBox(21, 21, 31, 31), 0, 0.80),  # hit (IoU ~0.68)
    Detection(PixelBox(40, 40, 50, 50), 0, 0.60),  # matches nothing -> FP
]}
report = pd.evaluate_detections(detections, manifest)
print("miniature scenario:")
print(f"  counts: {report.counts['ship']}")
print(f"  AP (all-point): {report.per_class_ap['ship']:.4f}")
legacy = pd.evaluate_detections(detections, manifest, voc11=True)
print(f"  AP (11-point):  {legacy.per_class_ap['ship']:.4f}")

# Full fixture: mAP on novel vs base classes, then classification-only.
workdir = tempfile.mkdtemp(prefix="protodetect-demo-")
train, test = pd.generate_fixture(pd.FixtureSpec(noise=0.6, seed=2), workdir)
protos = pd.build_object_prototypes(train)
crops = pd.sample_background_crops(train, crops_per_image=8, seed=3)
protos = pd.with_background(protos,
                            pd.build_background_prototypes(crops, k=32, seed=3))
tuned, _ = pd.finetune(train, protos, pd.TrainConfig(epochs=40, seed=4))

per_image = {}
for entry in test.entries:
    fm = pd.load_entry_features(test, entry)
    per_image[entry.image_id] = pd.detect_image(fm, list(entry.proposals), tuned)

print("\nfixture detection results:")
for subset in ("all", "base", "novel"):
    r = pd.evaluate_detections(per_image, test, class_filter=subset)
    print(f"  mAP50[{subset:5s}] = {r.map_value:.3f}  over {r.class_filter}")

cls = pd.evaluate_classification(test, tuned)
print(f"\nclassification-only protocol (GT boxes as proposals):")
print(f"  accuracy {cls.accuracy:.3f}, macro F1 {cls.macro_f1:.3f}")
print(f"  confusion matrix rows=true class, cols={cls.row_labels[:4]}... :")
print(np.array2string(cls.confusion[:, :6], prefix="  "))
