"""Acceptance gate: every criterion at its stated tolerance.

Each test prints one `ACCEPTANCE PASS/FAIL: <criterion>` line (visible with
`pytest -rA` or `-s`). Oracle- and property-based throughout; nothing here
needs real backbone features.
"""

import json
import math
import time

import numpy as np
import pytest

from protodetect import (
    Detection,
    FixtureSpec,
    PrototypeSet,
    TrainBatchItem,
    backward,
    forward_loss,
    generate_fixture,
    load_manifest,
    nms,
    pool_box_embedding,
    score_box,
    similarity_map,
)
from protodetect.cli import main
from protodetect.classify import classify_proposal
from protodetect.evaluate import evaluate_detections
from protodetect.types import normalize_rows
from conftest import (
    make_feature_map,
    random_box,
    random_feature_map,
    simple_class_table,
)
import oracles


def _report(name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE {status}: {name}" + (f" ({detail})" if detail else ""))
    assert ok, f"{name}: {detail}"


def test_gradient_oracle():
    """Analytic gradients vs central finite differences, 50 random instances."""
    rng = np.random.default_rng(20240601)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        rows = int(rng.integers(2, 7))       # J+K <= 6
        dim = int(rng.integers(2, 9))        # D <= 8
        batch_size = int(rng.integers(1, 9))  # batch <= 8
        params = rng.standard_normal((rows, dim)) * rng.uniform(0.5, 2.0)
        batch = [TrainBatchItem(pooled_embedding=rng.standard_normal(dim),
                                target_row=int(rng.integers(0, rows)))
                 for _ in range(batch_size)]
        tau = float(rng.uniform(0.05, 1.0))
        grad = backward(batch, params, tau)
        fd = oracles.finite_difference_grad(
            lambda p: forward_loss(batch, p, tau)[0], params, h=1e-4)
        # floor shields the relative error from FD truncation noise at ~0
        rel = np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-3)
        worst = max(worst, float(rel.max()))
    elapsed = time.perf_counter() - start
    _report("gradient oracle (50 instances, 1e-4 relative)",
            worst < 1e-4 and elapsed < 10.0,
            f"worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_pooling_oracle():
    """pool_box_embedding and score_box vs pixel-level brute force, 1000 pairs."""
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    table = simple_class_table(background=2)
    worst = 0.0
    for i in range(500):
        ragged = i % 2 == 1
        fm = random_feature_map(rng, gh=int(rng.integers(3, 9)),
                                gw=int(rng.integers(3, 9)),
                                dim=4, patch_size=int(rng.integers(4, 10)),
                                ragged_edge=ragged)
        vectors = rng.standard_normal((4, 4))
        vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
        protos = PrototypeSet(table, vectors.astype("<f4"))
        sim = similarity_map(fm, protos)
        for _ in range(2):
            box = random_box(rng, fm.image_w, fm.image_h, min_side=0.5)
            got_pool = pool_box_embedding(fm, box)
            want_pool = oracles.pixel_pool_oracle(fm, box)
            got_score = score_box(sim, box)
            want_score = oracles.pixel_score_oracle(
                sim.values, sim.patch_size, sim.image_h, sim.image_w, box)
            worst = max(worst,
                        float(np.abs(got_pool - want_pool).max()),
                        float(np.abs(got_score - want_score).max()))
    elapsed = time.perf_counter() - start
    _report("pooling oracle (1000 map/box pairs, 1e-6)",
            worst < 1e-6 and elapsed < 30.0,
            f"worst abs err {worst:.2e}, {elapsed:.1f}s")


def test_nms_and_map_oracles():
    rng = np.random.default_rng(99)
    nms_ok = True
    for _ in range(200):
        n = int(rng.integers(1, 31))
        dets = [Detection(box=random_box(rng, 50, 50, min_side=2),
                          class_id=int(rng.integers(0, 3)),
                          score=float(rng.uniform(-1, 1)))
                for _ in range(n)]
        thr = float(rng.uniform(0.2, 0.8))
        if nms(dets, thr) != oracles.nms_oracle(dets, thr):
            nms_ok = False
            break

    ap_worst = 0.0
    table = simple_class_table(names=("c0", "c1", "c2"))
    from protodetect import Annotation, DatasetManifest, ManifestEntry, PixelBox
    for _ in range(200):
        entries = []
        gt_by_class = {c: {} for c in range(3)}
        det_by_class = {c: [] for c in range(3)}
        detections = {}
        for i in range(2):
            image_id = f"im{i}"
            anns = []
            for _ in range(int(rng.integers(0, 6))):
                c = int(rng.integers(0, 3))
                box = random_box(rng, 80, 80, min_side=6)
                anns.append(Annotation(box, c))
                gt_by_class[c].setdefault(image_id, []).append(box)
            entries.append(ManifestEntry(image_id, "unused", 80, 80,
                                         tuple(anns), ()))
            dets = []
            for _ in range(int(rng.integers(0, 16))):  # <= 30 boxes total
                c = int(rng.integers(0, 3))
                if anns and rng.random() < 0.6:
                    src = anns[int(rng.integers(0, len(anns)))].box
                    d = rng.uniform(-5, 5, size=4)
                    box = PixelBox(src.x_min + d[0], src.y_min + d[1],
                                   src.x_max + d[2], src.y_max + d[3])
                    if box.is_degenerate():
                        box = src
                else:
                    box = random_box(rng, 80, 80, min_side=4)
                score = float(rng.random())
                dets.append(Detection(box, c, score))
                det_by_class[c].append((image_id, box, score))
            detections[image_id] = dets
        manifest = DatasetManifest(tuple(entries), table, "test")
        report = evaluate_detections(detections, manifest)
        for c, name in enumerate(table.names()):
            want = oracles.ap_sweep_oracle(det_by_class[c], gt_by_class[c], 0.5)
            got = report.per_class_ap[name]
            if want is None:
                assert got is None
            else:
                ap_worst = max(ap_worst, abs(got - want))
    _report("NMS and mAP oracles (200 scenarios each)",
            nms_ok and ap_worst < 1e-9,
            f"NMS exact: {nms_ok}, AP worst err {ap_worst:.2e}")


def test_scale_and_argmax_invariance():
    rng = np.random.default_rng(13)
    table = simple_class_table(names=("a", "b", "c"), background=2)
    ok = True
    for case in range(100):
        fm = random_feature_map(rng, gh=6, gw=6, dim=8)
        raw = rng.standard_normal((5, 8))
        protos = PrototypeSet(table, normalize_rows(raw).astype("<f4"))
        boxes = [random_box(rng, fm.image_w, fm.image_h, min_side=4)
                 for _ in range(5)]
        sim = similarity_map(fm, protos)
        decisions = [classify_proposal(score_box(sim, b), table) for b in boxes]

        # feature scaling by a power of two: similarity map is bit-identical
        scale = float(2.0 ** int(rng.integers(-3, 11)))
        scaled_fm = make_feature_map(fm.data * np.float32(scale),
                                     patch_size=fm.patch_size)
        sim_scaled = similarity_map(scaled_fm, protos)
        if not np.array_equal(sim.values, sim_scaled.values):
            ok = False
            break

        # arbitrary positive scaling of stored (pre-normalization) prototypes:
        # classification decisions are unchanged
        s = float(rng.uniform(0.01, 100.0))
        protos2 = PrototypeSet(table, normalize_rows(raw * s).astype("<f4"))
        sim2 = similarity_map(fm, protos2)
        decisions2 = [classify_proposal(score_box(sim2, b), table)
                      for b in boxes]
        if [d if d is None else d[0] for d in decisions] != \
                [d if d is None else d[0] for d in decisions2]:
            ok = False
            break

        # forward logits invariant under positive scaling of free parameters
        batch = [TrainBatchItem(pooled_embedding=rng.standard_normal(8),
                                target_row=int(rng.integers(0, 5)))
                 for _ in range(3)]
        _, logits_a = forward_loss(batch, raw, 0.1)
        _, logits_b = forward_loss(batch, raw * 2.0, 0.1)
        if not np.array_equal(logits_a, logits_b):
            ok = False
            break
    _report("scale/argmax invariance (100 cases, exact)", ok)


def _run_pipeline(base, data_dir, finetune_epochs=50):
    """CLI pipeline; returns (averaged mAP, finetuned mAP, finetuned accuracy)."""
    train = str(data_dir / "train_manifest.json")
    test = str(data_dir / "test_manifest.json")
    proto = str(base / "p.proto")
    proto_ft = str(base / "p_ft.proto")

    assert main(["build-prototypes", "--manifest", train, "--out", proto]) == 0
    assert main(["build-background", "--manifest", train, "--seed", "3",
                 "--out", proto]) == 0

    def detect_and_eval(proto_path, tag):
        dets = str(base / f"dets_{tag}.json")
        report = str(base / f"report_{tag}.json")
        assert main(["detect", "--manifest", test, "--prototypes", proto_path,
                     "--out", dets]) == 0
        assert main(["evaluate", "--detections", dets, "--manifest", test,
                     "--classes", "all", "--out", report]) == 0
        return json.load(open(report))["map"]

    map_avg = detect_and_eval(proto, "avg")
    assert main(["finetune", "--manifest", train, "--prototypes", proto,
                 "--epochs", str(finetune_epochs), "--seed", "11",
                 "--out", proto_ft]) == 0
    map_ft = detect_and_eval(proto_ft, "ft")
    cls_report = str(base / "cls.json")
    assert main(["classify-eval", "--manifest", test, "--prototypes", proto_ft,
                 "--out", cls_report]) == 0
    accuracy = json.load(open(cls_report))["accuracy"]
    return map_avg, map_ft, accuracy


def test_synthetic_end_to_end(tmp_path):
    spec = FixtureSpec()  # 4 classes, dim 32, 10 shots
    start = time.perf_counter()
    data = tmp_path / "default"
    generate_fixture(spec, str(data))
    map_avg, map_ft, accuracy = _run_pipeline(tmp_path, data)
    elapsed = time.perf_counter() - start
    _report("synthetic end-to-end (mAP >= 0.90, accuracy >= 0.95, < 60 s)",
            map_ft >= 0.90 and accuracy >= 0.95 and elapsed < 60.0,
            f"mAP {map_ft:.3f}, accuracy {accuracy:.3f}, {elapsed:.1f}s")

    # raise the noise until averaged prototypes drop to mAP <= 0.85, then
    # fine-tuning must recover at least 0.02 of it
    noise = spec.noise
    hard = None
    for step in range(8):
        noise *= 1.35
        hard_dir = tmp_path / f"hard{step}"
        generate_fixture(FixtureSpec(noise=noise), str(hard_dir))
        m_avg, m_ft, _ = _run_pipeline(tmp_path / f"run{step}", hard_dir)
        if m_avg <= 0.85:
            hard = (noise, m_avg, m_ft)
            break
    _report("fine-tuning gain >= 0.02 once averaged mAP <= 0.85",
            hard is not None and hard[2] >= hard[1] + 0.02,
            "no qualifying noise level" if hard is None else
            f"noise {hard[0]:.2f}: averaged {hard[1]:.3f} -> "
            f"finetuned {hard[2]:.3f}")


def test_determinism_of_stochastic_subcommands(tmp_path):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps({"images_per_class": 3,
                                     "test_images_per_class": 3}))
    outputs = {}
    for tag in ("a", "b"):
        root = tmp_path / tag
        data = root / "data"
        assert main(["fixture", "--spec", str(spec_path), "--seed", "21",
                     "--out", str(data)]) == 0
        train = str(data / "train_manifest.json")
        proto = str(root / "p.proto")
        proto_ft = str(root / "p_ft.proto")
        assert main(["build-prototypes", "--manifest", train,
                     "--out", proto]) == 0
        assert main(["build-background", "--manifest", train, "--k", "12",
                     "--crops-per-image", "4", "--seed", "5",
                     "--out", proto]) == 0
        assert main(["finetune", "--manifest", train, "--prototypes", proto,
                     "--epochs", "5", "--seed", "8", "--negatives", "2",
                     "--out", proto_ft, "--log", str(root / "t.jsonl")]) == 0
        fmap_bytes = b"".join(
            p.read_bytes() for p in sorted((data / "features").iterdir()))
        outputs[tag] = {
            "fixture_features": fmap_bytes,
            "fixture_train": open(train, "rb").read(),
            "background": open(proto, "rb").read(),
            "finetuned": open(proto_ft, "rb").read(),
            "train_log": open(root / "t.jsonl", "rb").read(),
        }
    mismatched = [k for k in outputs["a"] if outputs["a"][k] != outputs["b"][k]]
    _report("determinism: stochastic subcommands byte-identical",
            mismatched == [], f"mismatch: {mismatched}" if mismatched else "")


def test_loss_sanity(tmp_path):
    # uniform logits: every row identical, any embedding
    rng = np.random.default_rng(3)
    for rows in (2, 5, 9):
        params = np.tile(rng.standard_normal((1, 6)), (rows, 1))
        batch = [TrainBatchItem(pooled_embedding=rng.standard_normal(6),
                                target_row=int(rng.integers(0, rows)))
                 for _ in range(4)]
        loss, _ = forward_loss(batch, params, 0.1)
        if abs(loss - math.log(rows)) >= 1e-9:
            _report("loss sanity", False,
                    f"uniform loss {loss} != log({rows})")

    data = tmp_path / "fixture"
    generate_fixture(FixtureSpec(), str(data))
    manifest = load_manifest(str(data / "train_manifest.json"))
    from protodetect import TrainConfig, build_object_prototypes, finetune
    protos = build_object_prototypes(manifest)
    _, logs = finetune(manifest, protos, TrainConfig(epochs=50, seed=4))
    decreasing = logs[49]["loss"] < logs[0]["loss"]
    _report("loss sanity (uniform = log(J+K), epoch-50 < epoch-1)",
            decreasing,
            f"epoch1 {logs[0]['loss']:.4f} -> epoch50 {logs[49]['loss']:.4f}")


@pytest.mark.skip(reason="needs exported DINOv2 features and a 10-shot "
                         "SIMD-style subset (see the adapter package)")
def test_secondary_real_data_direction_checks():
    """Fine-tuned beats averaged on novel-class mAP50; 0 negatives beats 10."""
