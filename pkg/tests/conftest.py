import numpy as np
import pytest

from protodetect import (
    Annotation,
    ClassTable,
    DatasetManifest,
    FeatureMap,
    ManifestEntry,
    ObjectClass,
    PixelBox,
    write_feature_map,
)


def make_feature_map(data, patch_size=8, image_h=None, image_w=None):
    data = np.asarray(data, dtype="<f4")
    gh, gw, dim = data.shape
    return FeatureMap(grid_h=gh, grid_w=gw, dim=dim, patch_size=patch_size,
                      image_h=image_h if image_h is not None else gh * patch_size,
                      image_w=image_w if image_w is not None else gw * patch_size,
                      data=data)


def random_feature_map(rng, gh=8, gw=8, dim=4, patch_size=8,
                       ragged_edge=False):
    data = rng.standard_normal((gh, gw, dim)).astype("<f4")
    image_h = gh * patch_size - (3 if ragged_edge else 0)
    image_w = gw * patch_size - (5 if ragged_edge else 0)
    return make_feature_map(data, patch_size, image_h, image_w)


def random_box(rng, image_w, image_h, min_side=1.0):
    w = rng.uniform(min_side, image_w)
    h = rng.uniform(min_side, image_h)
    x0 = rng.uniform(0.0, image_w - w)
    y0 = rng.uniform(0.0, image_h - h)
    return PixelBox(x0, y0, x0 + w, y0 + h)


def simple_class_table(names=("car", "plane"), background=0, novel=()):
    return ClassTable(
        object_classes=tuple(
            ObjectClass(n, "novel" if n in novel else "base") for n in names),
        background_count=background,
    )


def write_dataset(tmp_path, feature_maps, annotations_per_image,
                  proposals_per_image=None, class_table=None,
                  split_role="train_shots"):
    """Materialize feature maps plus a manifest under tmp_path.

    feature_maps: dict image_id -> FeatureMap
    annotations_per_image: dict image_id -> list[Annotation]
    """
    if class_table is None:
        class_table = simple_class_table()
    entries = []
    for image_id, fm in feature_maps.items():
        rel = f"features/{image_id}.fmap"
        write_feature_map(fm, str(tmp_path / rel))
        props = tuple((proposals_per_image or {}).get(image_id, ()))
        entries.append(ManifestEntry(
            image_id=image_id, feature_file=rel,
            image_h=fm.image_h, image_w=fm.image_w,
            annotations=tuple(annotations_per_image.get(image_id, ())),
            proposals=props))
    return DatasetManifest(entries=tuple(entries), class_table=class_table,
                           split_role=split_role, base_dir=str(tmp_path))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


__all__ = [
    "Annotation", "make_feature_map", "random_feature_map", "random_box",
    "simple_class_table", "write_dataset",
]
