import json
import struct
import subprocess
import sys

import numpy as np
import pytest

from fmap_adapter import ExportJob, export_features
from fmap_adapter.cli import main
from conftest import write_coco, write_png

FMAP_HEADER = struct.Struct("<4sIIIIIII")


def read_fmap_header(path):
    raw = open(path, "rb").read()
    magic, version, gh, gw, dim, ps, ih, iw = FMAP_HEADER.unpack_from(raw)
    payload = np.frombuffer(raw, dtype="<f4", offset=FMAP_HEADER.size)
    return (magic, version, gh, gw, dim, ps, ih, iw), payload


class TestExportFeatures:
    def test_export_writes_contractual_fmaps(self, tiny_dataset, tmp_path):
        images_dir, coco = tiny_dataset
        job = ExportJob(images_dir=str(images_dir), annotations=str(coco),
                        output_dir=str(tmp_path / "out"), backbone="stub",
                        patch_size=14, dim=8, seed=0)
        result = export_features(job)
        assert result.exported == 3
        assert result.skipped == 0
        doc = json.load(open(result.manifest_path))
        assert doc["format"] == "manifest"
        assert [c["name"] for c in doc["class_table"]["object_classes"]] == \
            ["ship", "plane"]
        entry = doc["entries"][0]
        header, payload = read_fmap_header(
            str(tmp_path / "out" / entry["feature_file"]))
        magic, version, gh, gw, dim, ps, ih, iw = header
        assert magic == b"FMAP" and version == 1
        assert (ih, iw) == (48, 64)
        # ceiling division: 48/14 -> 4, 64/14 -> 5
        assert (gh, gw) == (4, 5)
        assert payload.size == gh * gw * dim

    def test_validates_with_engine_cli(self, tiny_dataset, tmp_path):
        images_dir, coco = tiny_dataset
        job = ExportJob(images_dir=str(images_dir), annotations=str(coco),
                        output_dir=str(tmp_path / "out"), backbone="stub",
                        patch_size=14, dim=8, seed=0, jitter_variants=2)
        result = export_features(job)
        proc = subprocess.run(
            [sys.executable, "-m", "protodetect.cli", "validate",
             "--manifest", result.manifest_path],
            capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr

    def test_jitter_variants_written_and_distinct(self, tiny_dataset, tmp_path):
        images_dir, coco = tiny_dataset
        job = ExportJob(images_dir=str(images_dir), annotations=str(coco),
                        output_dir=str(tmp_path / "out"), backbone="stub",
                        patch_size=14, dim=8, seed=0, jitter_variants=2)
        result = export_features(job)
        doc = json.load(open(result.manifest_path))
        entry = doc["entries"][0]
        assert len(entry["feature_variants"]) == 2
        _, base = read_fmap_header(str(tmp_path / "out" / entry["feature_file"]))
        for variant in entry["feature_variants"]:
            _, var = read_fmap_header(str(tmp_path / "out" / variant))
            assert var.size == base.size
            assert not np.array_equal(var, base)

    def test_export_deterministic(self, tiny_dataset, tmp_path):
        images_dir, coco = tiny_dataset
        payloads = []
        for tag in ("a", "b"):
            job = ExportJob(images_dir=str(images_dir), annotations=str(coco),
                            output_dir=str(tmp_path / tag), backbone="stub",
                            patch_size=14, dim=8, seed=5, jitter_variants=1)
            result = export_features(job)
            doc = json.load(open(result.manifest_path))
            blob = b""
            for entry in doc["entries"]:
                blob += open(str(tmp_path / tag / entry["feature_file"]), "rb").read()
                for v in entry.get("feature_variants", ()):
                    blob += open(str(tmp_path / tag / v), "rb").read()
            payloads.append(blob)
        assert payloads[0] == payloads[1]

    def test_resize_recorded_and_boxes_scaled(self, tiny_dataset, tmp_path):
        images_dir, coco = tiny_dataset
        job = ExportJob(images_dir=str(images_dir), annotations=str(coco),
                        output_dir=str(tmp_path / "out"), backbone="stub",
                        patch_size=14, dim=8, seed=0, resize=(128, 96))
        result = export_features(job)
        doc = json.load(open(result.manifest_path))
        assert doc["export_meta"]["resize"] == [128, 96]
        entry = doc["entries"][0]
        assert (entry["image_w"], entry["image_h"]) == (128, 96)
        # original box [8, 6, 28, 22] in a 64x48 image doubles
        assert entry["annotations"][0]["box"] == [16.0, 12.0, 56.0, 44.0]

    def test_proposals_attached(self, tiny_dataset, tmp_path):
        images_dir, coco = tiny_dataset
        proposals = tmp_path / "props.json"
        proposals.write_text(json.dumps({"0": [[1, 2, 11, 12]],
                                         "1": [[3, 3, 13, 13]]}))
        job = ExportJob(images_dir=str(images_dir), annotations=str(coco),
                        output_dir=str(tmp_path / "out"), backbone="stub",
                        patch_size=14, dim=8, seed=0,
                        proposals=str(proposals))
        result = export_features(job)
        doc = json.load(open(result.manifest_path))
        by_id = {e["image_id"]: e for e in doc["entries"]}
        assert by_id["0"]["proposals"] == [[1.0, 2.0, 11.0, 12.0]]
        assert by_id["2"]["proposals"] == []

    def test_unreadable_image_becomes_diagnostic(self, tiny_dataset, tmp_path):
        images_dir, coco = tiny_dataset
        (images_dir / "img_1.png").unlink()
        job = ExportJob(images_dir=str(images_dir), annotations=str(coco),
                        output_dir=str(tmp_path / "out"), backbone="stub",
                        patch_size=14, dim=8, seed=0)
        result = export_features(job)
        assert result.exported == 2
        assert result.skipped == 1
        assert any("img_1.png" in d for d in result.diagnostics)

    def test_zero_successes_aborts(self, tiny_dataset, tmp_path):
        images_dir, coco = tiny_dataset
        for p in images_dir.iterdir():
            p.unlink()
        job = ExportJob(images_dir=str(images_dir), annotations=str(coco),
                        output_dir=str(tmp_path / "out"), backbone="stub",
                        patch_size=14, dim=8, seed=0)
        with pytest.raises(RuntimeError, match="no images"):
            export_features(job)

    def test_novel_roles_assigned(self, tiny_dataset, tmp_path):
        images_dir, coco = tiny_dataset
        job = ExportJob(images_dir=str(images_dir), annotations=str(coco),
                        output_dir=str(tmp_path / "out"), backbone="stub",
                        patch_size=14, dim=8, seed=0,
                        novel_classes=("plane",))
        result = export_features(job)
        doc = json.load(open(result.manifest_path))
        roles = {c["name"]: c["role"]
                 for c in doc["class_table"]["object_classes"]}
        assert roles == {"ship": "base", "plane": "novel"}


class TestNShotExport(object):
    def _dataset(self, tmp_path, rng, n_images=40):
        images_dir = tmp_path / "images"
        images_dir.mkdir()
        images, annotations = [], []
        k = 0
        for i in range(n_images):
            name = f"im_{i}.png"
            write_png(images_dir / name, rng, width=42, height=28)
            images.append((i, name, 42, 28))
            for _ in range(int(rng.integers(1, 4))):
                cat = int(rng.integers(1, 4))
                annotations.append((i, cat, [2, 2, 10, 10]))
                k += 1
        coco = tmp_path / "coco.json"
        write_coco(coco, images, annotations,
                   [(1, "a"), (2, "b"), (3, "c")])
        return images_dir, coco

    def test_n_shot_counts_and_meta(self, tmp_path, rng):
        images_dir, coco = self._dataset(tmp_path, rng)
        job = ExportJob(images_dir=str(images_dir), annotations=str(coco),
                        output_dir=str(tmp_path / "out"), backbone="stub",
                        patch_size=14, dim=8, seed=4, n_shot=10)
        result = export_features(job)
        for name, count in result.class_counts.items():
            assert 8 <= count <= 16, (name, count)
        doc = json.load(open(result.manifest_path))
        assert doc["export_meta"]["n_shot"] == 10
        kept = {e["image_id"] for e in doc["entries"]}
        assert len(kept) == len(doc["entries"])  # no image twice


class TestCli:
    def test_export_subcommand(self, tiny_dataset, tmp_path):
        images_dir, coco = tiny_dataset
        out = tmp_path / "out"
        code = main(["export", "--images", str(images_dir),
                     "--annotations", str(coco), "--out", str(out),
                     "--backbone", "stub", "--patch-size", "14", "--dim", "8",
                     "--novel-classes", "plane", "--seed", "1",
                     "--jitter-variants", "1"])
        assert code == 0
        assert (out / "manifest.json").exists()
        assert (out / "manifest.json.config.json").exists()

    def test_subset_subcommand(self, tiny_dataset, tmp_path):
        _, coco = tiny_dataset
        out = tmp_path / "sel.json"
        assert main(["subset", "--annotations", str(coco), "--n", "1",
                     "--seed", "0", "--out", str(out)]) == 0
        doc = json.load(open(out))
        assert set(doc) == {"n", "seed", "images", "class_counts"}

    def test_usage_errors(self):
        assert main(["export", "--bogus"]) == 2
        assert main(["nope"]) == 2

    def test_runtime_error_exit_code(self, tmp_path):
        assert main(["subset", "--annotations", str(tmp_path / "missing.json"),
                     "--n", "3", "--seed", "0",
                     "--out", str(tmp_path / "o.json")]) == 1

    def test_bad_resize_rejected(self, tiny_dataset, tmp_path):
        images_dir, coco = tiny_dataset
        assert main(["export", "--images", str(images_dir),
                     "--annotations", str(coco),
                     "--out", str(tmp_path / "out"), "--seed", "1",
                     "--resize", "banana"]) == 1

    def test_unknown_subset_class_rejected(self, tiny_dataset, tmp_path):
        _, coco = tiny_dataset
        assert main(["subset", "--annotations", str(coco), "--n", "2",
                     "--seed", "0", "--classes", "whale",
                     "--out", str(tmp_path / "o.json")]) == 1
