"""protodetect: few-shot object detection on pre-extracted feature maps.

The engine classifies class-agnostic region proposals against learned
class-reference prototypes: unit-norm embedding vectors averaged from a few
annotated boxes (plus K-Means background clusters from object-free crops),
optionally sharpened by gradient-based fine-tuning. Images never enter the
library; it consumes dense per-patch feature grids exported by any backbone.
"""

from .types import (
    Annotation,
    ClassTable,
    DatasetManifest,
    Detection,
    FeatureMap,
    ManifestEntry,
    ObjectClass,
    PixelBox,
    PrototypeSet,
)
from .geometry import OverlapWeightMap, box_to_cell_weights, iou, nms
from .io import (
    Diagnostic,
    load_detections,
    load_entry_features,
    load_manifest,
    load_prototypes,
    read_feature_map,
    save_detections,
    save_manifest,
    save_prototypes,
    validate_manifest,
    write_feature_map,
)
from .prototypes import (
    CropSample,
    KMeansResult,
    build_background_prototypes,
    build_object_prototypes,
    kmeans,
    pool_box_embedding,
    sample_background_crops,
    with_background,
)
from .classify import (
    SimilarityMap,
    classify_proposal,
    detect_image,
    score_box,
    similarity_map,
)
from .train import (
    AdamState,
    TrainBatchItem,
    TrainConfig,
    adam_step,
    assign_negative_target,
    augment_feature_grid,
    backward,
    finetune,
    forward_loss,
)
from .evaluate import (
    ClassificationReport,
    EvalReport,
    evaluate_classification,
    evaluate_detections,
)
from .fixture import FixtureSpec, generate_fixture

__version__ = "0.1.0"

__all__ = [
    "Annotation", "ClassTable", "DatasetManifest", "Detection", "FeatureMap",
    "ManifestEntry", "ObjectClass", "PixelBox", "PrototypeSet",
    "OverlapWeightMap", "box_to_cell_weights", "iou", "nms",
    "Diagnostic", "load_detections", "load_entry_features", "load_manifest",
    "load_prototypes", "read_feature_map", "save_detections", "save_manifest",
    "save_prototypes", "validate_manifest", "write_feature_map",
    "CropSample", "KMeansResult", "build_background_prototypes",
    "build_object_prototypes", "kmeans", "pool_box_embedding",
    "sample_background_crops", "with_background",
    "SimilarityMap", "classify_proposal", "detect_image", "score_box",
    "similarity_map",
    "AdamState", "TrainBatchItem", "TrainConfig", "adam_step",
    "assign_negative_target", "augment_feature_grid", "backward", "finetune",
    "forward_loss",
    "ClassificationReport", "EvalReport", "evaluate_classification",
    "evaluate_detections",
    "FixtureSpec", "generate_fixture",
    "__version__",
]
