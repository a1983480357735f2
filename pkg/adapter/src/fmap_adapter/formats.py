"""Writers for the detection engine's wire formats.

The engine consumes FMAP feature files and manifest JSON; both formats are
documented in the engine's README and produced here byte-compatibly. This
package deliberately does not import the engine: the files are the contract.

FMAP: magic "FMAP", version u32=1, grid_h u32, grid_w u32, dim u32,
patch_size u32, image_h u32, image_w u32, then grid_h*grid_w*dim float32,
all little-endian, row-major (h, w, channel). The grid tiles the image by
ceiling division.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

FMAP_HEADER = struct.Struct("<4sIIIIIII")
FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1


def atomic_write_bytes(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: str, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2) + "\n").encode("utf-8"))


def write_fmap(path: str, features: np.ndarray, patch_size: int,
               image_h: int, image_w: int) -> None:
    """Write one feature grid; validates the ceiling-division contract."""
    grid_h, grid_w, dim = features.shape
    for grid, img in ((grid_h, image_h), (grid_w, image_w)):
        if grid * patch_size < img or (grid - 1) * patch_size >= img:
            raise ValueError(
                f"grid {grid} with patch {patch_size} does not tile image "
                f"side {img} (expected ceil({img}/{patch_size}))")
    header = FMAP_HEADER.pack(FMAP_MAGIC, FMAP_VERSION, grid_h, grid_w, dim,
                              patch_size, image_h, image_w)
    payload = np.ascontiguousarray(features, dtype="<f4").tobytes()
    atomic_write_bytes(path, header + payload)


def rle_encode_mask(mask: np.ndarray) -> dict:
    m = np.asarray(mask, dtype=bool).reshape(-1)
    counts, value, run = [], False, 0
    for v in m:
        if v == value:
            run += 1
        else:
            counts.append(run)
            value = v
            run = 1
    counts.append(run)
    return {"height": int(mask.shape[0]), "width": int(mask.shape[1]),
            "counts": " ".join(str(c) for c in counts)}


def manifest_document(class_names_with_roles, split_role, entries,
                      export_meta=None) -> dict:
    """Manifest JSON matching the engine's schema.

    entries: list of dicts with image_id, feature_file, image_h, image_w,
    annotations (box/class/mask), proposals, optional feature_variants.
    """
    doc = {
        "format": "manifest",
        "version": 1,
        "class_table": {
            "object_classes": [{"name": n, "role": r}
                               for n, r in class_names_with_roles],
            "background_count": 0,
        },
        "split_role": split_role,
        "entries": entries,
    }
    if export_meta:
        doc["export_meta"] = export_meta
    return doc
