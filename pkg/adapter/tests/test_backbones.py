import colorsys

import numpy as np
import pytest

from fmap_adapter import StubBackbone, create_backbone
from fmap_adapter.backbones import pad_to_patch_multiple
from fmap_adapter.jitter import (
    JitterParams,
    JitterRecipe,
    apply_jitter,
    hsv_to_rgb,
    rgb_to_hsv,
    sample_jitter_params,
)


class TestStubBackbone:
    def test_grid_contract_exact_multiple(self, rng):
        bb = StubBackbone(patch_size=14, dim=32)
        grid = bb.extract(rng.random((644, 644, 3)).astype(np.float32))
        assert grid.shape == (46, 46, 32)

    def test_grid_contract_ceiling(self, rng):
        bb = StubBackbone(patch_size=14, dim=8)
        grid = bb.extract(rng.random((645, 650, 3)).astype(np.float32))
        assert grid.shape == (47, 47, 8)  # ceil(645/14)=47, ceil(650/14)=47

    def test_deterministic(self, rng):
        image = rng.random((60, 80, 3)).astype(np.float32)
        a = StubBackbone(patch_size=10, dim=16).extract(image)
        b = StubBackbone(patch_size=10, dim=16).extract(image)
        assert np.array_equal(a, b)

    def test_content_dependent(self, rng):
        bb = StubBackbone(patch_size=10, dim=16)
        a = bb.extract(rng.random((40, 40, 3)).astype(np.float32))
        b = bb.extract(rng.random((40, 40, 3)).astype(np.float32))
        assert not np.array_equal(a, b)

    def test_pad_to_patch_multiple(self, rng):
        image = rng.random((30, 45, 3)).astype(np.float32)
        padded = pad_to_patch_multiple(image, 14)
        assert padded.shape == (42, 56, 3)
        assert np.array_equal(padded[:30, :45], image)
        assert np.array_equal(pad_to_patch_multiple(padded, 14), padded)


class TestRegistry:
    def test_stub_options(self):
        bb = create_backbone("stub", patch_size=7, dim=12)
        assert (bb.patch_size, bb.dim) == (7, 12)

    def test_unknown_name_rejected(self):
        with pytest.raises(ValueError, match="unknown backbone"):
            create_backbone("resnet50")

    def test_unknown_dinov2_arch_rejected(self):
        from fmap_adapter.backbones import DinoV2Backbone
        with pytest.raises(ValueError, match="unknown DINOv2 arch"):
            DinoV2Backbone("dinov2_vitxxl")


class TestJitter:
    def test_params_within_recipe(self, rng):
        recipe = JitterRecipe()
        for _ in range(100):
            p = sample_jitter_params(rng, recipe)
            assert 0.8 <= p.brightness <= 1.2
            assert 0.8 <= p.contrast <= 1.2
            assert 0.8 <= p.saturation <= 1.2
            assert -0.1 <= p.hue <= 0.1

    def test_deterministic_given_seed(self):
        a = sample_jitter_params(np.random.default_rng(3))
        b = sample_jitter_params(np.random.default_rng(3))
        assert a == b

    def test_identity_params_change_nothing(self, rng):
        image = rng.random((12, 9, 3)).astype(np.float32)
        out = apply_jitter(image, JitterParams(1.0, 1.0, 1.0, 0.0))
        assert out == pytest.approx(image, abs=1e-6)

    def test_brightness_scales(self, rng):
        image = rng.random((6, 6, 3)).astype(np.float32) * 0.5
        out = apply_jitter(image, JitterParams(1.2, 1.0, 1.0, 0.0))
        assert out == pytest.approx(image * 1.2, abs=1e-6)

    def test_output_stays_in_range(self, rng):
        image = rng.random((8, 8, 3)).astype(np.float32)
        for _ in range(20):
            p = sample_jitter_params(rng)
            out = apply_jitter(image, p)
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_hsv_round_trip_matches_colorsys(self, rng):
        for _ in range(200):
            r, g, b = (float(v) for v in rng.random(3))
            hsv = rgb_to_hsv(np.array([[[r, g, b]]], dtype=np.float32))[0, 0]
            want = colorsys.rgb_to_hsv(r, g, b)
            assert hsv == pytest.approx(want, abs=1e-5)
            back = hsv_to_rgb(np.array([[hsv]], dtype=np.float32))[0, 0]
            assert back == pytest.approx([r, g, b], abs=1e-5)

    def test_hue_shift_wraps(self):
        red = np.zeros((1, 1, 3), dtype=np.float32)
        red[..., 0] = 1.0
        shifted = apply_jitter(red, JitterParams(1.0, 1.0, 1.0, 1 / 3))
        assert shifted[0, 0] == pytest.approx([0.0, 1.0, 0.0], abs=1e-5)
