"""Photometric color jitter on float RGB arrays.

Defaults follow the training recipe: brightness 0.2, contrast 0.2,
saturation 0.2, hue 0.1. Factors are sampled per variant from a seeded
generator and applied in a fixed order (brightness, contrast, saturation,
hue), so exports are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass(frozen=True)
class JitterRecipe:
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.1


@dataclass(frozen=True)
class JitterParams:
    brightness: float
    contrast: float
    saturation: float
    hue: float


def sample_jitter_params(rng: np.random.Generator,
                         recipe: JitterRecipe = JitterRecipe()) -> JitterParams:
    def factor(strength):
        return float(rng.uniform(max(0.0, 1.0 - strength), 1.0 + strength))

    return JitterParams(
        brightness=factor(recipe.brightness),
        contrast=factor(recipe.contrast),
        saturation=factor(recipe.saturation),
        hue=float(rng.uniform(-recipe.hue, recipe.hue)),
    )


def apply_jitter(image: np.ndarray, params: JitterParams) -> np.ndarray:
    """Jitter an (H, W, 3) float image in [0, 1]; output clipped to [0, 1]."""
    img = np.asarray(image, dtype=np.float32)
    img = np.clip(img * params.brightness, 0.0, 1.0)

    gray = img @ GRAY_WEIGHTS
    img = np.clip(params.contrast * img
                  + (1.0 - params.contrast) * float(gray.mean()), 0.0, 1.0)

    gray = (img @ GRAY_WEIGHTS)[..., None]
    img = np.clip(params.saturation * img + (1.0 - params.saturation) * gray,
                  0.0, 1.0)

    if params.hue != 0.0:
        hsv = rgb_to_hsv(img)
        hsv[..., 0] = (hsv[..., 0] + params.hue) % 1.0
        img = hsv_to_rgb(hsv)
    return img


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    value = maxc
    delta = maxc - minc
    sat = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)

    safe = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    hue = np.where(maxc == r, bc - gc,
                   np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    hue = np.where(delta > 0, (hue / 6.0) % 1.0, 0.0)
    return np.stack([hue, sat, value], axis=-1).astype(np.float32)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    sector_rgb = ((v, t, p), (q, v, p), (p, v, t),
                  (p, q, v), (t, p, v), (v, p, q))
    out = np.zeros(hsv.shape, dtype=np.float32)
    for k, channels in enumerate(sector_rgb):
        mask = i == k
        for c in range(3):
            out[..., c][mask] = channels[c][mask]
    return out
