"""Tour of the core pipeline: feature maps -> prototypes -> detections.

Generates a small synthetic dataset (no real backbone needed), builds object
and background prototypes, and walks one image through similarity maps,
box scoring, classification and NMS.

Run: python demos/01_prototypes_and_detection.py
"""

import tempfile

import numpy as np

import protodetect as pd

workdir = tempfile.mkdtemp(prefix="protodetect-demo-")
print(f"writing fixture to {workdir}")

spec = pd.FixtureSpec(n_classes=3, dim=16, images_per_class=5,
                      test_images_per_class=3, seed=0)
train, test = pd.generate_fixture(spec, workdir)
print(f"train: {len(train.entries)} images, "
      f"classes: {train.class_table.names()}")

# Object prototypes: per class, the mean of its pooled box embeddings,
# L2-normalized. Each pooled embedding is an area-weighted average of the
# patch features under the annotation box.
protos = pd.build_object_prototypes(train)
print(f"\nobject prototypes: {protos.vectors.shape}, "
      f"row norms {np.linalg.norm(protos.vectors, axis=1)}")

# Background prototypes: object-free crops, clustered with K-Means; each
# cluster mean becomes one background reference row.
crops = pd.sample_background_crops(train, crops_per_image=8, seed=1)
print(f"sampled {len(crops)} object-free crops")
bg_rows = pd.build_background_prototypes(crops, k=12, seed=1)
protos = pd.with_background(protos, bg_rows)
print(f"full prototype set: {protos.num_rows} rows "
      f"({protos.class_table.num_objects} object + "
      f"{protos.class_table.background_count} background)")

# One test image end to end.
entry = test.entries[0]
fm = pd.load_entry_features(test, entry)
print(f"\nimage {entry.image_id}: grid {fm.grid_h}x{fm.grid_w}, "
      f"{fm.dim}-d patches of {fm.patch_size}px")

sim = pd.similarity_map(fm, protos)
print(f"similarity map {sim.values.shape}, range "
      f"[{sim.values.min():.3f}, {sim.values.max():.3f}]")

for box in entry.proposals[:4]:
    scores = pd.score_box(sim, box)
    verdict = pd.classify_proposal(scores, protos.class_table)
    label = ("background" if verdict is None
             else protos.class_table.row_label(verdict[0]))
    print(f"  proposal {[round(v, 1) for v in box.as_list()]} -> {label} "
          f"(best {scores.max():+.3f})")

detections = pd.detect_image(fm, list(entry.proposals), protos, nms_iou=0.5)
print(f"\n{len(entry.proposals)} proposals -> {len(detections)} detections "
      f"after background discard + NMS:")
for d in detections:
    print(f"  {protos.class_table.row_label(d.class_id):10s} "
          f"score {d.score:+.3f} at {[round(v, 1) for v in d.box.as_list()]}")
truth = [(protos.class_table.row_label(a.class_id), a.box.as_list())
         for a in entry.annotations]
print(f"ground truth: {truth}")
