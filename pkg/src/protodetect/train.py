"""Prototype fine-tuning.

Prototypes are held as free parameter vectors and L2-normalized inside the
forward pass, so cosine semantics stay exact while Adam moves freely. Logits
are cosine/temperature over all object+background rows; the loss is mean
softmax cross-entropy over the batch. Gradients never flow to embeddings (the
backbone is frozen); the analytic gradient below includes the Jacobian of the
row normalization.

One batch = one image's items (its ground-truth boxes as positives plus
freshly sampled object-free crops as negatives); one Adam step per batch; one
epoch = one seeded-shuffle pass over the manifest.

Spatial augmentations act on the feature grid in its padded frame (image
extent rounded up to whole cells): flips and 90-degree rotation permute cells
and transform boxes exactly, random crop takes a cell-aligned sub-rectangle.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .prototypes import (
    annotation_size_range,
    pool_box_embedding,
    sample_nonoverlapping_boxes,
)
from .io import load_entry_features
from .types import (
    Annotation,
    DatasetManifest,
    FeatureMap,
    PixelBox,
    PrototypeSet,
    PROVENANCE_FINETUNED,
    mask_extent,
)

log = logging.getLogger(__name__)

BACKGROUND_TARGET_DYNAMIC = "dynamic"
BACKGROUND_TARGET_FROZEN = "frozen"

CROP_KEEP_AREA_FRACTION = 0.2
AUGMENT_PROBABILITY = 0.5


@dataclass
class TrainConfig:
    """All fine-tuning hyperparameters."""

    epochs: int = 200
    lr: float = 2e-4
    lr_drop_epochs: tuple[int, ...] = (10, 100)
    lr_drop_factor: float = 0.1
    temperature: float = 0.1
    negatives_per_image: int = 0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    hflip: bool = True
    vflip: bool = True
    rot90: bool = True
    random_crop: bool = True
    crop_scale: tuple[float, float] = (0.5, 1.0)
    background_target_mode: str = BACKGROUND_TARGET_DYNAMIC
    freeze_background: bool = False
    use_masks: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.negatives_per_image < 0:
            raise ValueError("negatives_per_image must be >= 0")
        if self.background_target_mode not in (BACKGROUND_TARGET_DYNAMIC,
                                               BACKGROUND_TARGET_FROZEN):
            raise ValueError(
                f"unknown background_target_mode {self.background_target_mode!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-indexed epoch under the step schedule."""
        drops = sum(1 for d in self.lr_drop_epochs if epoch >= d)
        return self.lr * self.lr_drop_factor ** drops


@dataclass
class TrainBatchItem:
    pooled_embedding: np.ndarray  # (D,) float64
    target_row: int               # absolute row index (object or background)
    is_negative: bool = False


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @staticmethod
    def zeros_like(params: np.ndarray) -> "AdamState":
        return AdamState(m=np.zeros_like(params), v=np.zeros_like(params), t=0)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              lr: float, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> tuple[np.ndarray, AdamState]:
    """One Adam update with bias-corrected moments; returns new arrays."""
    if params.shape != grads.shape:
        raise ValueError(f"params {params.shape} vs grads {grads.shape}")
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * grads
    v = b2 * state.v + (1.0 - b2) * grads * grads
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m=m, v=v, t=t)


def _as_param_matrix(protos) -> np.ndarray:
    if isinstance(protos, PrototypeSet):
        return protos.vectors.astype(np.float64)
    return np.asarray(protos, dtype=np.float64)


def _cosine_logits(batch: list[TrainBatchItem], params: np.ndarray,
                   temperature: float):
    if not batch:
        raise ValueError("empty batch")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    emb = np.stack([np.asarray(i.pooled_embedding, dtype=np.float64)
                    for i in batch])
    for idx, item in enumerate(batch):
        if not np.isfinite(np.asarray(item.pooled_embedding, dtype=np.float64)).all():
            raise ValueError(f"non-finite embedding in batch item {idx}")
    norms_e = np.linalg.norm(emb, axis=1)
    emb_n = emb / np.where(norms_e > 0.0, norms_e, 1.0)[:, None]
    norms_p = np.linalg.norm(params, axis=1)
    if np.any(norms_p == 0.0):
        raise ValueError("degenerate prototype parameter row (zero norm)")
    p_n = params / norms_p[:, None]
    cos = emb_n @ p_n.T
    logits = cos / temperature
    targets = np.array([i.target_row for i in batch], dtype=np.int64)
    if targets.min() < 0 or targets.max() >= params.shape[0]:
        raise ValueError("target_row out of range")
    return emb_n, p_n, norms_p, cos, logits, targets


def forward_loss(batch: list[TrainBatchItem], protos,
                 temperature: float) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of cosine/temperature logits; returns (loss, logits)."""
    params = _as_param_matrix(protos)
    _, _, _, _, logits, targets = _cosine_logits(batch, params, temperature)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(len(batch)), targets].mean())
    return loss, logits


def backward(batch: list[TrainBatchItem], protos,
             temperature: float) -> np.ndarray:
    """Analytic gradient of forward_loss w.r.t. the stored (unnormalized) rows.

    With q the softmax, e the normalized embedding, p_hat = p/|p| a row, the
    per-item gradient of row r is
    (q_r - [r = target]) * (e - (p_hat_r . e) p_hat_r) / (temperature * |p_r|);
    embeddings receive no gradient.
    """
    params = _as_param_matrix(protos)
    emb_n, p_n, norms_p, cos, logits, targets = _cosine_logits(
        batch, params, temperature)
    shifted = logits - logits.max(axis=1, keepdims=True)
    q = np.exp(shifted)
    q /= q.sum(axis=1, keepdims=True)
    g = q.copy()
    g[np.arange(len(batch)), targets] -= 1.0
    g /= len(batch)
    # d(cos_ir)/d(p_r) = (e_i - cos_ir * p_hat_r) / |p_r|
    raw = g.T @ emb_n - ((g * cos).sum(axis=0))[:, None] * p_n
    return raw / (temperature * norms_p[:, None])


def assign_negative_target(embedding: np.ndarray, protos: PrototypeSet) -> int:
    """Index within the background block of the most cosine-similar row."""
    j = protos.class_table.num_objects
    k = protos.class_table.background_count
    if k < 1:
        raise ValueError("no background prototypes to assign negatives to")
    return _nearest_background_row(np.asarray(embedding, dtype=np.float64),
                                   protos.vectors.astype(np.float64), j)


def _nearest_background_row(embedding: np.ndarray, params: np.ndarray,
                            num_objects: int) -> int:
    """Relative background index of the row most similar to `embedding`."""
    bg = params[num_objects:]
    norms = np.linalg.norm(bg, axis=1)
    e_norm = np.linalg.norm(embedding)
    denom = np.where(norms > 0.0, norms, 1.0) * (e_norm if e_norm > 0.0 else 1.0)
    sims = bg @ embedding / denom
    return int(np.argmax(sims))


# ---------------------------------------------------------------------------
# Feature-grid augmentations


def pad_frame(fm: FeatureMap) -> FeatureMap:
    """Extend the image rectangle to the full grid footprint (no data change)."""
    if fm.image_h == fm.grid_h * fm.patch_size and \
            fm.image_w == fm.grid_w * fm.patch_size:
        return fm
    return replace(fm, image_h=fm.grid_h * fm.patch_size,
                   image_w=fm.grid_w * fm.patch_size)


def _transform_mask(mask, fn):
    return None if mask is None else np.ascontiguousarray(fn(mask))


def hflip_grid(fm: FeatureMap,
               annotations: tuple[Annotation, ...]) -> tuple[FeatureMap, tuple]:
    fm = pad_frame(fm)
    w = fm.image_w
    data = np.ascontiguousarray(fm.data[:, ::-1, :])
    anns = tuple(Annotation(
        box=PixelBox(w - a.box.x_max, a.box.y_min, w - a.box.x_min, a.box.y_max),
        class_id=a.class_id,
        mask=_transform_mask(a.mask, lambda m: m[:, ::-1]),
        class_name=a.class_name,
    ) for a in annotations)
    return replace(fm, data=data), anns


def vflip_grid(fm: FeatureMap,
               annotations: tuple[Annotation, ...]) -> tuple[FeatureMap, tuple]:
    fm = pad_frame(fm)
    h = fm.image_h
    data = np.ascontiguousarray(fm.data[::-1, :, :])
    anns = tuple(Annotation(
        box=PixelBox(a.box.x_min, h - a.box.y_max, a.box.x_max, h - a.box.y_min),
        class_id=a.class_id,
        mask=_transform_mask(a.mask, lambda m: m[::-1, :]),
        class_name=a.class_name,
    ) for a in annotations)
    return replace(fm, data=data), anns


def rot90_grid(fm: FeatureMap,
               annotations: tuple[Annotation, ...]) -> tuple[FeatureMap, tuple]:
    """Rotate the grid 90 degrees counter-clockwise: (x, y) -> (y, W - x)."""
    fm = pad_frame(fm)
    w = fm.image_w
    data = np.ascontiguousarray(np.rot90(fm.data, k=1, axes=(0, 1)))
    anns = tuple(Annotation(
        box=PixelBox(a.box.y_min, w - a.box.x_max, a.box.y_max, w - a.box.x_min),
        class_id=a.class_id,
        mask=_transform_mask(a.mask, lambda m: np.rot90(m, k=1)),
        class_name=a.class_name,
    ) for a in annotations)
    out = FeatureMap(grid_h=fm.grid_w, grid_w=fm.grid_h, dim=fm.dim,
                     patch_size=fm.patch_size,
                     image_h=fm.image_w, image_w=fm.image_h, data=data)
    return out, anns


def crop_grid(fm: FeatureMap, annotations: tuple[Annotation, ...],
              row0: int, col0: int, crop_h: int, crop_w: int
              ) -> tuple[FeatureMap, tuple]:
    """Cell-aligned sub-rectangle; boxes are shifted, re-clipped and dropped
    when their clipped area falls below CROP_KEEP_AREA_FRACTION of the
    original."""
    fm = pad_frame(fm)
    if not (0 <= row0 and row0 + crop_h <= fm.grid_h
            and 0 <= col0 and col0 + crop_w <= fm.grid_w
            and crop_h >= 1 and crop_w >= 1):
        raise ValueError("crop rectangle outside the grid")
    ps = fm.patch_size
    ox, oy = col0 * ps, row0 * ps
    new_w, new_h = crop_w * ps, crop_h * ps
    data = np.ascontiguousarray(fm.data[row0:row0 + crop_h, col0:col0 + crop_w, :])
    anns = []
    for a in annotations:
        shifted = a.box.shifted(-ox, -oy)
        clipped = shifted.clip(new_w, new_h)
        if clipped is None or clipped.area < CROP_KEEP_AREA_FRACTION * a.box.area:
            continue
        anns.append(Annotation(box=clipped, class_id=a.class_id,
                               mask=_crop_mask(a, clipped, ox, oy),
                               class_name=a.class_name))
    out = FeatureMap(grid_h=crop_h, grid_w=crop_w, dim=fm.dim, patch_size=ps,
                     image_h=new_h, image_w=new_w, data=data)
    return out, tuple(anns)


def _crop_mask(ann: Annotation, new_box: PixelBox, ox: int, oy: int):
    """Slice the mask for the cropped box; integer offsets keep pixels aligned."""
    if ann.mask is None:
        return None
    old_ax, old_ay, _, _ = mask_extent(ann.box)
    new_ax, new_ay, new_w, new_h = mask_extent(new_box)
    j0 = new_ax + ox - old_ax
    i0 = new_ay + oy - old_ay
    sliced = ann.mask[i0:i0 + new_h, j0:j0 + new_w]
    if sliced.shape != (new_h, new_w) or not sliced.any():
        return None
    return np.ascontiguousarray(sliced)


def augment_feature_grid(fm: FeatureMap, annotations: tuple[Annotation, ...],
                         rng: np.random.Generator, hflip: bool = True,
                         vflip: bool = True, rot90: bool = True,
                         random_crop: bool = True,
                         crop_scale: tuple[float, float] = (0.5, 1.0)
                         ) -> tuple[FeatureMap, tuple]:
    """Apply each enabled augmentation with probability 0.5, in a fixed order
    (hflip, vflip, rot90, crop). Deterministic given the generator state."""
    fm = pad_frame(fm)
    annotations = tuple(annotations)
    if hflip and rng.random() < AUGMENT_PROBABILITY:
        fm, annotations = hflip_grid(fm, annotations)
    if vflip and rng.random() < AUGMENT_PROBABILITY:
        fm, annotations = vflip_grid(fm, annotations)
    if rot90 and rng.random() < AUGMENT_PROBABILITY:
        fm, annotations = rot90_grid(fm, annotations)
    if random_crop and rng.random() < AUGMENT_PROBABILITY:
        lo, hi = crop_scale
        crop_h = max(1, round(fm.grid_h * rng.uniform(lo, hi)))
        crop_w = max(1, round(fm.grid_w * rng.uniform(lo, hi)))
        crop_h, crop_w = min(crop_h, fm.grid_h), min(crop_w, fm.grid_w)
        row0 = int(rng.integers(0, fm.grid_h - crop_h + 1))
        col0 = int(rng.integers(0, fm.grid_w - crop_w + 1))
        fm, annotations = crop_grid(fm, annotations, row0, col0, crop_h, crop_w)
    return fm, annotations


# ---------------------------------------------------------------------------
# Fine-tuning loop


def finetune(manifest: DatasetManifest, protos_init: PrototypeSet,
             config: TrainConfig) -> tuple[PrototypeSet, list[dict]]:
    """Optimize prototypes on the manifest's ground-truth boxes.

    Returns the fine-tuned PrototypeSet (rows re-normalized, provenance
    "finetuned") and one log dict per epoch: {"epoch", "loss", "acc", "lr"}.
    Deterministic given config.seed. When an entry lists photometric feature
    variants, one of [base, *variants] is drawn uniformly each epoch.
    """
    if not manifest.entries:
        raise ValueError("empty manifest")
    num_objects = protos_init.class_table.num_objects
    num_background = protos_init.class_table.background_count
    if config.negatives_per_image > 0 and num_background < 1:
        raise ValueError("negatives_per_image > 0 requires background prototypes")

    initial = protos_init.vectors.astype(np.float64)
    params = initial.copy()
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(config.seed)
    size_range = annotation_size_range(manifest)
    any_aug = config.hflip or config.vflip or config.rot90 or config.random_crop

    # per image: the base feature map plus any photometric variants
    feature_cache = {
        e.image_id: [load_entry_features(manifest, e)]
        + [load_entry_features(manifest, e, v)
           for v in range(len(e.feature_variants))]
        for e in manifest.entries
    }

    logs: list[dict] = []
    for epoch in range(1, config.epochs + 1):
        lr = config.lr_at(epoch)
        order = rng.permutation(len(manifest.entries))
        item_count = 0
        loss_sum = 0.0
        correct = 0
        for idx in order:
            entry = manifest.entries[idx]
            variants = feature_cache[entry.image_id]
            fm = variants[0] if len(variants) == 1 \
                else variants[int(rng.integers(0, len(variants)))]
            anns = entry.annotations
            if any_aug:
                fm, anns = augment_feature_grid(
                    fm, anns, rng, hflip=config.hflip, vflip=config.vflip,
                    rot90=config.rot90, random_crop=config.random_crop,
                    crop_scale=config.crop_scale)
            batch = _image_batch(fm, anns, rng, config, params, initial,
                                 num_objects, size_range)
            if not batch:
                continue
            loss, logits = forward_loss(batch, params, config.temperature)
            grad = backward(batch, params, config.temperature)
            if config.freeze_background:
                grad[num_objects:] = 0.0
            params, state = adam_step(params, grad, state, lr,
                                      betas=config.adam_betas, eps=config.adam_eps)
            targets = np.array([i.target_row for i in batch])
            correct += int((logits.argmax(axis=1) == targets).sum())
            loss_sum += loss * len(batch)
            item_count += len(batch)
        if item_count == 0:
            raise ValueError("no training items in epoch "
                             f"{epoch} (no annotations and no negatives)")
        logs.append({"epoch": epoch, "loss": loss_sum / item_count,
                     "acc": correct / item_count, "lr": lr})

    vectors = (params / np.linalg.norm(params, axis=1)[:, None]).astype("<f4")
    tuned = PrototypeSet(class_table=protos_init.class_table, vectors=vectors,
                         temperature=config.temperature,
                         provenance=PROVENANCE_FINETUNED)
    return tuned, logs


def _image_batch(fm: FeatureMap, anns, rng: np.random.Generator,
                 config: TrainConfig, params: np.ndarray, initial: np.ndarray,
                 num_objects: int, size_range) -> list[TrainBatchItem]:
    batch = [TrainBatchItem(
        pooled_embedding=pool_box_embedding(
            fm, a.box, a.mask if config.use_masks else None),
        target_row=a.class_id,
    ) for a in anns]
    if config.negatives_per_image > 0:
        assign_matrix = (params
                         if config.background_target_mode == BACKGROUND_TARGET_DYNAMIC
                         else initial)
        blocked = [a.box for a in anns]
        boxes = sample_nonoverlapping_boxes(
            rng, fm.image_w, fm.image_h, blocked,
            config.negatives_per_image, size_range)
        for box in boxes:
            emb = pool_box_embedding(fm, box)
            rel = _nearest_background_row(emb, assign_matrix, num_objects)
            batch.append(TrainBatchItem(pooled_embedding=emb,
                                        target_row=num_objects + rel,
                                        is_negative=True))
    return batch

