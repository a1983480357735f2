"""fmap_adapter: exports backbone features into the engine's file formats."""

from .backbones import CLIPVisionBackbone, DinoV2Backbone, StubBackbone, create_backbone
from .datasets import BoxAnnotation, ImageRecord, load_coco, load_proposals
from .export import ExportJob, ExportResult, export_features
from .jitter import JitterParams, JitterRecipe, apply_jitter, sample_jitter_params
from .subset import select_n_shot

__version__ = "0.1.0"

__all__ = [
    "CLIPVisionBackbone", "DinoV2Backbone", "StubBackbone", "create_backbone",
    "BoxAnnotation", "ImageRecord", "load_coco", "load_proposals",
    "ExportJob", "ExportResult", "export_features",
    "JitterParams", "JitterRecipe", "apply_jitter", "sample_jitter_params",
    "select_n_shot",
    "__version__",
]
