"""Patch-feature backbones behind a tiny common interface.

A backbone takes an RGB image as a float array in [0, 1] of shape (H, W, 3)
and returns a (ceil(H/p), ceil(W/p), D) float32 grid of patch embeddings.
Images whose sides are not multiples of the patch size are padded on the
bottom/right before encoding, so the grid always satisfies the FMAP
ceiling-division contract.

The stub backbone needs nothing beyond numpy and produces deterministic
content-dependent features; the DINOv2 and CLIP wrappers import torch /
transformers lazily and raise a clear error when those (or their weights)
are unavailable.
"""

from __future__ import annotations

import numpy as np

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

DINOV2_ARCHS = ("dinov2_vits14", "dinov2_vitb14", "dinov2_vitl14",
                "dinov2_vitg14")


def pad_to_patch_multiple(image: np.ndarray, patch_size: int) -> np.ndarray:
    h, w = image.shape[:2]
    pad_h = (-h) % patch_size
    pad_w = (-w) % patch_size
    if pad_h == 0 and pad_w == 0:
        return image
    return np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")


class StubBackbone:
    """Deterministic feature extractor for tests and pipeline dry runs.

    Per patch it computes simple color/texture statistics and projects them
    through a fixed random matrix, so different images (and different
    photometric variants of one image) produce different grids while repeat
    runs are bit-identical.
    """

    def __init__(self, patch_size: int = 14, dim: int = 32):
        self.name = "stub"
        self.patch_size = patch_size
        self.dim = dim
        rng = np.random.default_rng(0)
        self._projection = rng.standard_normal((8, dim)).astype(np.float32)

    def extract(self, image: np.ndarray) -> np.ndarray:
        image = pad_to_patch_multiple(np.asarray(image, dtype=np.float32),
                                      self.patch_size)
        h, w = image.shape[:2]
        p = self.patch_size
        gh, gw = h // p, w // p
        patches = image.reshape(gh, p, gw, p, 3).transpose(0, 2, 1, 3, 4)
        means = patches.mean(axis=(2, 3))                    # (gh, gw, 3)
        stds = patches.std(axis=(2, 3))                      # (gh, gw, 3)
        gray = patches.mean(axis=4)
        grad_x = np.abs(np.diff(gray, axis=3)).mean(axis=(2, 3))
        grad_y = np.abs(np.diff(gray, axis=2)).mean(axis=(2, 3))
        stats = np.concatenate([means, stds,
                                grad_x[..., None], grad_y[..., None]], axis=2)
        return (stats @ self._projection).astype("<f4")


class DinoV2Backbone:
    """Frozen DINOv2 ViT; arbitrary input sizes via padding to /14."""

    def __init__(self, arch: str = "dinov2_vitl14", device: str = "cpu"):
        if arch not in DINOV2_ARCHS:
            raise ValueError(f"unknown DINOv2 arch {arch!r}; "
                             f"choose one of {DINOV2_ARCHS}")
        try:
            import torch
        except ImportError as exc:
            raise RuntimeError("DINOv2 backbone needs torch installed "
                               "(pip install 'fmap-adapter[backbones]')") from exc
        self._torch = torch
        try:
            self._model = torch.hub.load("facebookresearch/dinov2", arch)
        except Exception as exc:
            raise RuntimeError(f"could not load {arch} weights via torch.hub "
                               f"(network/weights unavailable?): {exc}") from exc
        self._model.eval().to(device)
        self._device = device
        self.name = arch
        self.patch_size = 14
        self.dim = int(self._model.embed_dim)

    def extract(self, image: np.ndarray) -> np.ndarray:
        torch = self._torch
        image = pad_to_patch_multiple(np.asarray(image, dtype=np.float32), 14)
        gh, gw = image.shape[0] // 14, image.shape[1] // 14
        x = (image - IMAGENET_MEAN) / IMAGENET_STD
        tensor = torch.from_numpy(x.transpose(2, 0, 1)[None]).to(self._device)
        with torch.no_grad():
            tokens = self._model.forward_features(tensor)["x_norm_patchtokens"]
        return (tokens[0].reshape(gh, gw, self.dim)
                .cpu().numpy().astype("<f4"))


class CLIPVisionBackbone:
    """CLIP-family vision tower (huggingface id), patch tokens only.

    Positional embeddings are interpolated so non-native input sizes keep the
    ceiling-division grid contract.
    """

    def __init__(self, model_id: str = "openai/clip-vit-large-patch14",
                 device: str = "cpu"):
        try:
            import torch
            from transformers import CLIPVisionModel
        except ImportError as exc:
            raise RuntimeError("CLIP backbone needs torch and transformers "
                               "(pip install 'fmap-adapter[backbones]')") from exc
        self._torch = torch
        try:
            self._model = CLIPVisionModel.from_pretrained(model_id)
        except Exception as exc:
            raise RuntimeError(f"could not load {model_id} "
                               f"(network/weights unavailable?): {exc}") from exc
        self._model.eval().to(device)
        self._device = device
        self.name = f"clip:{model_id}"
        self.patch_size = int(self._model.config.patch_size)
        self.dim = int(self._model.config.hidden_size)

    def extract(self, image: np.ndarray) -> np.ndarray:
        torch = self._torch
        p = self.patch_size
        image = pad_to_patch_multiple(np.asarray(image, dtype=np.float32), p)
        gh, gw = image.shape[0] // p, image.shape[1] // p
        mean = np.array([0.48145466, 0.4578275, 0.40821073], dtype=np.float32)
        std = np.array([0.26862954, 0.26130258, 0.27577711], dtype=np.float32)
        x = (image - mean) / std
        tensor = torch.from_numpy(x.transpose(2, 0, 1)[None]).to(self._device)
        with torch.no_grad():
            out = self._model(pixel_values=tensor,
                              interpolate_pos_encoding=True)
        tokens = out.last_hidden_state[0, 1:]  # drop the CLS token
        return tokens.reshape(gh, gw, self.dim).cpu().numpy().astype("<f4")


def create_backbone(spec: str, patch_size: int | None = None,
                    dim: int | None = None, device: str = "cpu"):
    """Build a backbone from its CLI name.

    "stub" (options: patch_size, dim), "dinov2_vit{s,b,l,g}14", or
    "clip:<huggingface model id>".
    """
    if spec == "stub":
        return StubBackbone(patch_size=patch_size or 14, dim=dim or 32)
    if spec in DINOV2_ARCHS:
        return DinoV2Backbone(spec, device=device)
    if spec.startswith("clip:"):
        return CLIPVisionBackbone(spec.split(":", 1)[1], device=device)
    raise ValueError(f"unknown backbone {spec!r}; expected 'stub', one of "
                     f"{DINOV2_ARCHS}, or 'clip:<model id>'")
