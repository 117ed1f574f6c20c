"""Cross-domain class mixing: sample classes from a source label map, build a
binary paste mask, and composite source pixels/labels onto a target image."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .shapeworld import IGNORE


@dataclass
class ClassMask:
    """Binary paste mask (1 = source pixel) with the class set that produced it."""

    mask: np.ndarray  # uint8 (H, W)
    classes: frozenset[int]


@dataclass
class ClassMixBatch:
    """One mixed sample: image = M*src + (1-M)*tgt, labels mixed the same way."""

    image: np.ndarray        # (H, W, 3)
    labels: np.ndarray       # (H, W) int
    mask: ClassMask
    mask_scale: np.ndarray   # (H/stride, W/stride) uint8, block-majority downsample
    source_ratio: float      # mean of the full-resolution mask


def sample_classes(y_s: np.ndarray, rng: np.random.Generator) -> set[int]:
    """Pick ceil(K/2) of the K distinct non-ignore classes, uniformly without replacement."""
    present = np.unique(y_s)
    present = present[present != IGNORE]
    if present.size == 0:
        raise ValueError("no valid classes in source label map")
    k = math.ceil(present.size / 2)
    chosen = rng.choice(present, size=k, replace=False)
    return {int(c) for c in chosen}


def build_mask(y_s: np.ndarray, classes: set[int] | frozenset[int]) -> ClassMask:
    """Indicator of pixels whose source label is in `classes`; ignore pixels stay 0."""
    mask = np.isin(y_s, list(classes)) & (y_s != IGNORE)
    return ClassMask(mask=mask.astype(np.uint8), classes=frozenset(int(c) for c in classes))


def downsample_mask(mask: np.ndarray, stride: int = 8) -> np.ndarray:
    """Block-majority downsample: 1 iff the source fraction in a block is > 0.5.

    Exact ties go to 0 (target) so borderline blocks keep their guidance
    supervision from target pseudo-labels.
    """
    h, w = mask.shape
    if h % stride != 0 or w % stride != 0:
        raise ValueError(f"mask shape {mask.shape} not divisible by stride {stride}")
    blocks = mask.reshape(h // stride, stride, w // stride, stride)
    counts = blocks.sum(axis=(1, 3), dtype=np.int64)
    return (counts * 2 > stride * stride).astype(np.uint8)


def mix(
    x_s: np.ndarray,
    y_s: np.ndarray,
    x_t: np.ndarray,
    y_t_pseudo: np.ndarray,
    mask: ClassMask | np.ndarray,
    stride: int = 8,
) -> ClassMixBatch:
    """Composite source onto target through the mask, exactly per pixel."""
    cmask = mask if isinstance(mask, ClassMask) else ClassMask(np.asarray(mask, dtype=np.uint8), frozenset())
    m = cmask.mask
    if not (x_s.shape[:2] == y_s.shape == x_t.shape[:2] == y_t_pseudo.shape == m.shape):
        raise ValueError(
            "shape mismatch: "
            f"x_s {x_s.shape}, y_s {y_s.shape}, x_t {x_t.shape}, y_t {y_t_pseudo.shape}, mask {m.shape}"
        )
    sel = m.astype(bool)
    image = np.where(sel[..., None], x_s, x_t)
    labels = np.where(sel, y_s, y_t_pseudo)
    ratio = float(m.mean(dtype=np.float64))
    return ClassMixBatch(
        image=image,
        labels=labels,
        mask=cmask,
        mask_scale=downsample_mask(m, stride=stride),
        source_ratio=ratio,
    )
