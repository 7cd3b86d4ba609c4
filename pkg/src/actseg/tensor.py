"""Dense-grid primitives shared by every other module.

Images are ``(H, W)`` float arrays, label masks ``(H, W)`` integer arrays,
probability maps ``(H, W, C)`` float arrays.  Soft targets carry an extra
per-pixel weight plane, see :class:`SoftLabelMap`.
"""

from typing import NamedTuple

import numpy as np

__all__ = [
    "SoftLabelMap",
    "softmax_per_pixel",
    "argmax_per_pixel",
    "one_hot",
    "check_image",
    "check_label_mask",
    "check_prob_map",
    "check_soft_label_map",
    "check_images",
]

PROB_ATOL = 1e-6


class SoftLabelMap(NamedTuple):
    """Per-pixel soft class targets plus a per-pixel loss weight."""

    targets: np.ndarray  # (H, W, C)
    pixel_weights: np.ndarray  # (H, W)

    @property
    def num_classes(self):
        return self.targets.shape[-1]


def check_image(x, min_size=1):
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"image must be 2-D (H, W), got shape {x.shape}")
    if x.shape[0] < min_size or x.shape[1] < min_size:
        raise ValueError(f"image must be at least {min_size}x{min_size}, got {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("image contains non-finite values")
    return x


def check_images(images, min_size=1, dtype=None):
    """Stack a sequence of equally sized images into a ``(B, H, W)`` array."""
    if isinstance(images, np.ndarray) and images.ndim == 2:
        images = images[None]
    arrs = [check_image(x, min_size) for x in images]
    if not arrs:
        raise ValueError("need at least one image")
    shape = arrs[0].shape
    for i, a in enumerate(arrs):
        if a.shape != shape:
            raise ValueError(f"image {i} has shape {a.shape}, expected {shape}")
    out = np.stack(arrs)
    return out if dtype is None else out.astype(dtype, copy=False)


def check_label_mask(mask, num_classes):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"label mask must be 2-D (H, W), got shape {mask.shape}")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if not np.issubdtype(mask.dtype, np.integer):
        if not np.all(np.equal(np.mod(mask, 1), 0)):
            raise ValueError("label mask must hold integer class indices")
        mask = mask.astype(np.int64)
    if mask.size and (mask.min() < 0 or mask.max() >= num_classes):
        raise ValueError(
            f"label mask values must lie in [0, {num_classes - 1}], "
            f"found range [{mask.min()}, {mask.max()}]"
        )
    return mask


def check_prob_map(p):
    p = np.asarray(p, dtype=float)
    if p.ndim != 3 or p.shape[-1] < 2:
        raise ValueError(f"probability map must be (H, W, C) with C >= 2, got {p.shape}")
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    if not np.allclose(p.sum(axis=-1), 1.0, rtol=0, atol=PROB_ATOL):
        raise ValueError("probabilities must sum to 1 at every pixel")
    return p


def check_soft_label_map(target, shape=None):
    targets = np.asarray(target.targets, dtype=float)
    weights = np.asarray(target.pixel_weights, dtype=float)
    if targets.ndim != 3 or weights.shape != targets.shape[:2]:
        raise ValueError(
            f"targets {targets.shape} and pixel_weights {weights.shape} are not congruent"
        )
    if shape is not None and targets.shape[:2] != tuple(shape):
        raise ValueError(f"target is {targets.shape[:2]}, expected {tuple(shape)}")
    if np.any(weights < 0) or np.any(weights > 1):
        raise ValueError("pixel_weights must lie in [0, 1]")
    if np.any(targets < 0) or np.any(targets > 1):
        raise ValueError("targets must lie in [0, 1]")
    active = weights > 0
    if not np.allclose(targets[active].sum(axis=-1), 1.0, rtol=0, atol=PROB_ATOL):
        raise ValueError("targets of weighted pixels must sum to 1")
    return SoftLabelMap(targets, weights)


def softmax_per_pixel(logits):
    """Softmax over the last axis, stabilised by subtracting the per-pixel max."""
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def argmax_per_pixel(p):
    """Per-pixel class of maximal probability; ties go to the lowest index."""
    # np.argmax returns the first maximal index, which is the tie-break we want
    return np.argmax(np.asarray(p), axis=-1)


def one_hot(mask, num_classes):
    mask = check_label_mask(mask, num_classes)
    targets = np.zeros(mask.shape + (num_classes,))
    np.put_along_axis(targets, mask[..., None], 1.0, axis=-1)
    return SoftLabelMap(targets, np.ones(mask.shape))
