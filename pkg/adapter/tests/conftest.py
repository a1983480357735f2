import json

import numpy as np
import pytest
from PIL import Image


def write_png(path, rng, width=64, height=48):
    pixels = (rng.random((height, width, 3)) * 255).astype(np.uint8)
    Image.fromarray(pixels).save(path)
    return pixels


def write_coco(path, images, annotations, categories):
    """images: [(id, file_name, w, h)]; annotations: [(image_id, cat_id, xywh)]."""
    doc = {
        "images": [{"id": i, "file_name": f, "width": w, "height": h}
                   for i, f, w, h in images],
        "annotations": [{"id": k, "image_id": i, "category_id": c, "bbox": b}
                        for k, (i, c, b) in enumerate(annotations)],
        "categories": [{"id": i, "name": n} for i, n in categories],
    }
    path.write_text(json.dumps(doc))
    return doc


@pytest.fixture
def rng():
    return np.random.default_rng(77)


@pytest.fixture
def tiny_dataset(tmp_path, rng):
    """Three images, two classes, one annotation box each."""
    images_dir = tmp_path / "images"
    images_dir.mkdir()
    images = []
    annotations = []
    for i in range(3):
        name = f"img_{i}.png"
        write_png(images_dir / name, rng, width=64, height=48)
        images.append((i, name, 64, 48))
        annotations.append((i, i % 2 + 1, [8 + i, 6, 20, 16]))
    coco = tmp_path / "coco.json"
    write_coco(coco, images, annotations, [(1, "ship"), (2, "plane")])
    return images_dir, coco
