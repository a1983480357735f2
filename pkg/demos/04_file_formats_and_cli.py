"""File formats and the command-line pipeline.

Dissects the FMAP binary header, the manifest JSON (including RLE masks),
and the prototype-set file, then replays the whole pipeline through the
`protodetect` CLI the way a shell script would.

Run: python demos/04_file_formats_and_cli.py
"""

import json
import struct
import tempfile
from pathlib import Path

import numpy as np

import protodetect as pd
from protodetect.cli import main
from protodetect.io import rle_decode, rle_encode

workdir = Path(tempfile.mkdtemp(prefix="protodetect-demo-"))

# --- FMAP binary layout -----------------------------------------------------
fm = pd.FeatureMap(grid_h=2, grid_w=3, dim=2, patch_size=14,
                   image_h=25, image_w=40,
                   data=np.arange(12, dtype="<f4").reshape(2, 3, 2))
fmap_path = workdir / "tiny.fmap"
pd.write_feature_map(fm, str(fmap_path))
raw = fmap_path.read_bytes()
magic, version, gh, gw, dim, ps, ih, iw = struct.unpack_from("<4sIIIIIII", raw)
print(f"FMAP header: magic={magic} version={version} grid={gh}x{gw} "
      f"dim={dim} patch={ps} image={iw}x{ih}")
print(f"payload: {len(raw) - 32} bytes = {gh}*{gw}*{dim} little-endian float32")

# --- RLE masks ---------------------------------------------------------------
mask = np.zeros((4, 6), dtype=bool)
mask[1:3, 2:5] = True
encoded = rle_encode(mask)
print(f"\nmask RLE: {encoded}  (alternating zero/one run lengths, row-major)")
assert np.array_equal(rle_decode(encoded), mask)

# --- CLI pipeline ------------------------------------------------------------
data = workdir / "data"
spec = workdir / "spec.json"
spec.write_text(json.dumps({"images_per_class": 5, "test_images_per_class": 5}))

steps = [
    ["fixture", "--spec", str(spec), "--seed", "1", "--out", str(data)],
    ["validate", "--manifest", str(data / "train_manifest.json")],
    ["build-prototypes", "--manifest", str(data / "train_manifest.json"),
     "--out", str(workdir / "p.proto")],
    ["build-background", "--manifest", str(data / "train_manifest.json"),
     "--k", "32", "--crops-per-image", "8", "--seed", "2",
     "--out", str(workdir / "p.proto")],
    ["finetune", "--manifest", str(data / "train_manifest.json"),
     "--prototypes", str(workdir / "p.proto"), "--epochs", "30", "--seed", "3",
     "--out", str(workdir / "p_ft.proto"), "--log", str(workdir / "train.jsonl")],
    ["detect", "--manifest", str(data / "test_manifest.json"),
     "--prototypes", str(workdir / "p_ft.proto"), "--nms-iou", "0.5",
     "--out", str(workdir / "detections.json")],
    ["evaluate", "--detections", str(workdir / "detections.json"),
     "--manifest", str(data / "test_manifest.json"), "--classes", "all",
     "--out", str(workdir / "report.json")],
    ["classify-eval", "--manifest", str(data / "test_manifest.json"),
     "--prototypes", str(workdir / "p_ft.proto"),
     "--out", str(workdir / "cls_report.json")],
    ["export-prototypes", "--prototypes", str(workdir / "p_ft.proto"),
     "--format", "csv", "--out", str(workdir / "prototypes.csv")],
]
print()
for argv in steps:
    code = main(argv)
    print(f"protodetect {argv[0]:18s} -> exit {code}")
    assert code == 0

report = json.loads((workdir / "report.json").read_text())
print(f"\nmAP50 = {report['map']:.3f}")
print(f"per class: { {k: None if v is None else round(v, 3) for k, v in report['per_class_ap'].items()} }")

proto_doc = json.loads((workdir / "p_ft.proto").read_text())
print(f"\nprototype file keys: {sorted(proto_doc)}")
print(f"  {proto_doc['rows']} rows x {proto_doc['dim']} dims, "
      f"temperature {proto_doc['temperature']}, "
      f"provenance {proto_doc['provenance']!r}")
print(f"  matrix stored as base64 float32 ({len(proto_doc['matrix_b64'])} chars)")
print(f"\nconfig echo written next to outputs: "
      f"{(workdir / 'report.json.config.json').exists()}")
