"""File formats and manifest validation.

Formats (all multi-byte integers and floats little-endian):

* Feature file (.fmap): header = magic "FMAP", version u32=1, grid_h u32,
  grid_w u32, dim u32, patch_size u32, image_h u32, image_w u32; payload =
  grid_h*grid_w*dim float32 values, row-major (h, then w, then channel).
* Manifest: JSON mirroring DatasetManifest; boxes as [x_min, y_min, x_max,
  y_max]; masks run-length encoded (see rle_encode).
* Prototype set: single JSON document; class table, dim, temperature and
  provenance in the header, the (J+K) x D float32 matrix base64-encoded
  row-major under "matrix_b64".
* Detections: JSON, per-image lists of {box, class (by name), score}.

Writes are atomic (temp file + rename in the target directory).
"""

from __future__ import annotations

import base64
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Optional

import numpy as np

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
    SPLIT_TEST,
    SPLIT_TRAIN_SHOTS,
    UNKNOWN_CLASS_ID,
    mask_extent,
)

log = logging.getLogger(__name__)

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1
_FMAP_HEADER = struct.Struct("<4sIIIIIII")

PMAT_MAGIC = b"PMAT"
_PMAT_HEADER = struct.Struct("<4sII")


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write bytes via a temp file and rename, so readers never see partials."""
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


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: str, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=False) + "\n")


# ---------------------------------------------------------------------------
# FMAP feature files


def write_feature_map(fm: FeatureMap, path: str) -> None:
    problems = fm.check()
    if problems:
        raise ValueError(f"invalid feature map for {path}: {problems[0]}")
    header = _FMAP_HEADER.pack(FMAP_MAGIC, FMAP_VERSION, fm.grid_h, fm.grid_w,
                               fm.dim, fm.patch_size, fm.image_h, fm.image_w)
    payload = np.ascontiguousarray(fm.data, dtype="<f4").tobytes()
    atomic_write_bytes(path, header + payload)


def read_feature_map(path: str) -> FeatureMap:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _FMAP_HEADER.size:
        raise ValueError(f"{path}: truncated feature file")
    magic, version, gh, gw, dim, ps, ih, iw = _FMAP_HEADER.unpack_from(raw)
    if magic != FMAP_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected FMAP")
    if version != FMAP_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    expected = gh * gw * dim * 4
    payload = raw[_FMAP_HEADER.size:]
    if len(payload) != expected:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, "
                         f"expected {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(gh, gw, dim)
    fm = FeatureMap(grid_h=gh, grid_w=gw, dim=dim, patch_size=ps,
                    image_h=ih, image_w=iw, data=data)
    problems = fm.check()
    if problems:
        raise ValueError(f"{path}: {problems[0]}")
    return fm


# ---------------------------------------------------------------------------
# Run-length-encoded binary masks

def rle_encode(mask: np.ndarray) -> dict:
    """Encode a 2-D boolean mask as alternating run lengths.

    Runs are over the row-major flattening and start with the count of zeros
    (possibly 0). Example: [[0,1,1],[1,0,0]] -> "1 3 2".
    """
    m = np.asarray(mask, dtype=bool)
    flat = m.reshape(-1)
    counts = []
    value = False
    run = 0
    for v in flat:
        if v == value:
            run += 1
        else:
            counts.append(run)
            value = v
            run = 1
    counts.append(run)
    return {"height": int(m.shape[0]), "width": int(m.shape[1]),
            "counts": " ".join(str(c) for c in counts)}


def rle_decode(obj: dict) -> np.ndarray:
    h, w = int(obj["height"]), int(obj["width"])
    counts = [int(c) for c in str(obj["counts"]).split()]
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for c in counts:
        if value:
            flat[pos:pos + c] = True
        pos += c
        value = not value
    if pos != h * w:
        raise ValueError(f"RLE covers {pos} pixels, mask is {h}x{w}")
    return flat.reshape(h, w)


# ---------------------------------------------------------------------------
# Manifest JSON


def _box_from_list(vals) -> PixelBox:
    x0, y0, x1, y1 = (float(v) for v in vals)
    return PixelBox(x0, y0, x1, y1)


def _ingest_box(box: PixelBox, image_w: int, image_h: int) -> PixelBox:
    """Clip to the image at ingestion; out-of-image boxes are kept for validate."""
    clipped = box.clip(image_w, image_h)
    return clipped if clipped is not None else box


def manifest_to_dict(manifest: DatasetManifest) -> dict:
    table = manifest.class_table
    entries = []
    for e in manifest.entries:
        anns = []
        for a in e.annotations:
            if 0 <= a.class_id < table.num_objects:
                name = table.object_classes[a.class_id].name
            else:
                name = a.class_name if a.class_name is not None else str(a.class_id)
            anns.append({
                "box": a.box.as_list(),
                "class": name,
                "mask": None if a.mask is None else rle_encode(a.mask),
            })
        edoc = {
            "image_id": e.image_id,
            "feature_file": e.feature_file,
            "image_h": e.image_h,
            "image_w": e.image_w,
            "annotations": anns,
            "proposals": [b.as_list() for b in e.proposals],
        }
        if e.feature_variants:
            edoc["feature_variants"] = list(e.feature_variants)
        entries.append(edoc)
    return {
        "format": "manifest",
        "version": 1,
        "class_table": {
            "object_classes": [{"name": c.name, "role": c.role}
                               for c in table.object_classes],
            "background_count": table.background_count,
        },
        "split_role": manifest.split_role,
        "entries": entries,
    }


def manifest_from_dict(doc: dict, base_dir: Optional[str] = None) -> DatasetManifest:
    tdoc = doc["class_table"]
    table = ClassTable(
        object_classes=tuple(ObjectClass(str(c["name"]), str(c["role"]))
                             for c in tdoc["object_classes"]),
        background_count=int(tdoc.get("background_count", 0)),
    )
    entries = []
    for ed in doc["entries"]:
        ih, iw = int(ed["image_h"]), int(ed["image_w"])
        anns = []
        for ad in ed.get("annotations", ()):
            name = str(ad["class"])
            idx = table.index_of(name)
            box = _ingest_box(_box_from_list(ad["box"]), iw, ih)
            mask = None
            if ad.get("mask") is not None:
                mask = rle_decode(ad["mask"])
            anns.append(Annotation(
                box=box,
                class_id=idx if idx is not None else UNKNOWN_CLASS_ID,
                mask=mask,
                class_name=None if idx is not None else name,
            ))
        props = tuple(_ingest_box(_box_from_list(b), iw, ih)
                      for b in ed.get("proposals", ()))
        entries.append(ManifestEntry(
            image_id=str(ed["image_id"]),
            feature_file=str(ed["feature_file"]),
            image_h=ih, image_w=iw,
            annotations=tuple(anns),
            proposals=props,
            feature_variants=tuple(str(v) for v in ed.get("feature_variants", ())),
        ))
    return DatasetManifest(entries=tuple(entries), class_table=table,
                           split_role=str(doc.get("split_role", SPLIT_TEST)),
                           base_dir=base_dir)


def save_manifest(manifest: DatasetManifest, path: str) -> None:
    write_json(path, manifest_to_dict(manifest))


def load_manifest(path: str) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    return manifest_from_dict(doc, base_dir=os.path.dirname(os.path.abspath(path)))


def resolve_feature_path(manifest: DatasetManifest, entry: ManifestEntry,
                         variant: Optional[int] = None) -> str:
    """Path of the entry's feature file, or of variant i when `variant` >= 0."""
    path = entry.feature_file if variant is None else entry.feature_variants[variant]
    if os.path.isabs(path) or manifest.base_dir is None:
        return path
    return os.path.join(manifest.base_dir, path)


def load_entry_features(manifest: DatasetManifest, entry: ManifestEntry,
                        variant: Optional[int] = None) -> FeatureMap:
    return read_feature_map(resolve_feature_path(manifest, entry, variant))


# ---------------------------------------------------------------------------
# Prototype set files


def save_prototypes(protos: PrototypeSet, path: str) -> None:
    vectors = np.ascontiguousarray(protos.vectors, dtype="<f4")
    doc = {
        "format": "protoset",
        "version": 1,
        "dim": int(vectors.shape[1]),
        "rows": int(vectors.shape[0]),
        "temperature": protos.temperature,
        "provenance": protos.provenance,
        "class_table": {
            "object_classes": [{"name": c.name, "role": c.role}
                               for c in protos.class_table.object_classes],
            "background_count": protos.class_table.background_count,
        },
        "dtype": "<f4",
        "matrix_b64": base64.b64encode(vectors.tobytes()).decode("ascii"),
    }
    write_json(path, doc)


def load_prototypes(path: str) -> PrototypeSet:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("format") != "protoset":
        raise ValueError(f"{path}: not a prototype set file")
    tdoc = doc["class_table"]
    table = ClassTable(
        object_classes=tuple(ObjectClass(str(c["name"]), str(c["role"]))
                             for c in tdoc["object_classes"]),
        background_count=int(tdoc.get("background_count", 0)),
    )
    rows, dim = int(doc["rows"]), int(doc["dim"])
    raw = base64.b64decode(doc["matrix_b64"])
    if len(raw) != rows * dim * 4:
        raise ValueError(f"{path}: matrix payload size mismatch")
    vectors = np.frombuffer(raw, dtype="<f4").reshape(rows, dim)
    protos = PrototypeSet(class_table=table, vectors=vectors,
                          temperature=float(doc["temperature"]),
                          provenance=str(doc["provenance"]))
    if rows != table.num_rows:
        raise ValueError(f"{path}: {rows} rows != class table {table.num_rows}")
    return protos


# ---------------------------------------------------------------------------
# Detections JSON


def save_detections(per_image: dict[str, list[Detection]], class_table: ClassTable,
                    path: str, image_order: Optional[list[str]] = None) -> None:
    order = image_order if image_order is not None else list(per_image)
    images = []
    for image_id in order:
        dets = per_image.get(image_id, [])
        images.append({
            "image_id": image_id,
            "detections": [{
                "box": d.box.as_list(),
                "class": class_table.object_classes[d.class_id].name,
                "score": float(d.score),
            } for d in dets],
        })
    write_json(path, {"format": "detections", "version": 1, "images": images})


def load_detections(path: str, class_table: ClassTable) -> dict[str, list[Detection]]:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("format") != "detections":
        raise ValueError(f"{path}: not a detections file")
    out: dict[str, list[Detection]] = {}
    for im in doc["images"]:
        dets = []
        for dd in im["detections"]:
            idx = class_table.index_of(str(dd["class"]))
            if idx is None:
                raise ValueError(f"{path}: unknown class {dd['class']!r}")
            dets.append(Detection(box=_box_from_list(dd["box"]),
                                  class_id=idx, score=float(dd["score"])))
        out[str(im["image_id"])] = dets
    return out


# ---------------------------------------------------------------------------
# Prototype matrix export (for external visualization tools)


def export_prototypes_csv(protos: PrototypeSet, path: str) -> None:
    dim = protos.dim
    lines = ["label," + ",".join(f"dim_{i}" for i in range(dim))]
    for label, row in zip(protos.row_labels(), protos.vectors):
        lines.append(label + "," + ",".join(repr(float(v)) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def export_prototypes_binary(protos: PrototypeSet, path: str) -> None:
    """Raw matrix: magic "PMAT", rows u32, cols u32, float32 data; labels in a
    sidecar JSON next to it."""
    vectors = np.ascontiguousarray(protos.vectors, dtype="<f4")
    header = _PMAT_HEADER.pack(PMAT_MAGIC, vectors.shape[0], vectors.shape[1])
    atomic_write_bytes(path, header + vectors.tobytes())
    write_json(path + ".labels.json", {"labels": protos.row_labels()})


def import_prototypes_binary(path: str) -> tuple[np.ndarray, list[str]]:
    with open(path, "rb") as f:
        raw = f.read()
    magic, rows, cols = _PMAT_HEADER.unpack_from(raw)
    if magic != PMAT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected PMAT")
    matrix = np.frombuffer(raw, dtype="<f4", offset=_PMAT_HEADER.size)
    matrix = matrix.reshape(rows, cols)
    labels = []
    sidecar = path + ".labels.json"
    if os.path.exists(sidecar):
        with open(sidecar, "r", encoding="utf-8") as f:
            labels = json.load(f)["labels"]
    return matrix, labels


# ---------------------------------------------------------------------------
# Validation


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    where: str
    message: str

    @property
    def is_fatal(self) -> bool:
        return self.severity == "error"

    def __str__(self):
        return f"[{self.severity}] {self.where}: {self.message}"


def validate_manifest(manifest: DatasetManifest,
                      check_features: bool = True) -> list[Diagnostic]:
    """Check every manifest invariant; empty list iff the manifest is valid.

    Fatal rules: unreadable/mismatched feature files, unknown class names,
    degenerate or out-of-image boxes, malformed masks, invalid class table.
    """
    diags: list[Diagnostic] = []

    def err(where, message):
        diags.append(Diagnostic("error", where, message))

    for p in manifest.class_table.check():
        err("class_table", p)
    if manifest.split_role not in (SPLIT_TRAIN_SHOTS, SPLIT_TEST):
        err("manifest", f"invalid split_role {manifest.split_role!r}")

    seen_ids = set()
    for e in manifest.entries:
        where = f"entry {e.image_id!r}"
        if e.image_id in seen_ids:
            err(where, "duplicate image_id")
        seen_ids.add(e.image_id)
        if e.image_h < 1 or e.image_w < 1:
            err(where, f"invalid image size {e.image_w}x{e.image_h}")

        if check_features:
            paths = [resolve_feature_path(manifest, e)]
            paths += [resolve_feature_path(manifest, e, v)
                      for v in range(len(e.feature_variants))]
            for path in paths:
                try:
                    fm = read_feature_map(path)
                except (OSError, ValueError) as exc:
                    err(where, f"unreadable feature file {path}: {exc}")
                else:
                    if (fm.image_h, fm.image_w) != (e.image_h, e.image_w):
                        err(where, f"feature file image size "
                                   f"{fm.image_w}x{fm.image_h} != manifest "
                                   f"{e.image_w}x{e.image_h}")

        for i, a in enumerate(e.annotations):
            awhere = f"{where} annotation {i}"
            if a.class_id == UNKNOWN_CLASS_ID or not (
                    0 <= a.class_id < manifest.class_table.num_objects):
                name = a.class_name if a.class_name else f"id {a.class_id}"
                err(awhere, f"unknown class {name!r}")
            _check_box(a.box, e.image_w, e.image_h, awhere, err)
            if a.mask is not None:
                _, _, mw, mh = mask_extent(a.box)
                if a.mask.shape != (mh, mw):
                    err(awhere, f"mask shape {a.mask.shape} does not match "
                                f"box extent ({mh}, {mw})")
                elif not a.mask.any():
                    err(awhere, "mask has no foreground pixels")
        for i, b in enumerate(e.proposals):
            _check_box(b, e.image_w, e.image_h, f"{where} proposal {i}", err)
    return diags


def _check_box(box: PixelBox, image_w: int, image_h: int, where, err) -> None:
    if box.is_degenerate():
        err(where, f"degenerate box {box.as_list()}")
    elif box.clip(image_w, image_h) is None:
        err(where, f"box {box.as_list()} lies outside the image")
    elif box.clip(image_w, image_h) != box:
        # Ingestion clips; a still-out-of-bounds box means it bypassed parsing.
        err(where, f"box {box.as_list()} extends past the image and was not clipped")
