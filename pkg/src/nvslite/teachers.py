"""Pluggable inpainting teachers for ground-truth fill generation.

A teacher is any ``(masked_image, hole_mask) -> filled_image`` callable with
values in [0, 1] that leaves visible pixels untouched. The default is a
classical iterative neighborhood fill, so label generation needs no
pretrained network; a learned teacher slots in behind the same signature.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

_NEIGHBORHOOD = np.ones((3, 3), dtype=np.float32)


def mean_fill(image: np.ndarray, hole_mask: np.ndarray) -> np.ndarray:
    """Fill holes with the per-channel mean of the visible pixels."""
    image = np.asarray(image, dtype=np.float32)
    hole = np.asarray(hole_mask, dtype=np.float32) > 0.5
    out = image.copy()
    visible = ~hole
    fill = image[visible].reshape(-1, image.shape[2]).mean(axis=0) if visible.any() \
        else np.full(image.shape[2], 0.5, dtype=np.float32)
    out[hole] = fill
    return np.clip(out, 0.0, 1.0)


def neighborhood_fill(image: np.ndarray, hole_mask: np.ndarray,
                      smooth_passes: int = 2) -> np.ndarray:
    """Iteratively average valid 8-neighbors into hole pixels until filled.

    Holes grow inward one ring per iteration; a few extra smoothing passes
    over the filled region soften the seams. Visible pixels are returned
    exactly as given.
    """
    image = np.asarray(image, dtype=np.float32)
    hole = np.asarray(hole_mask, dtype=np.float32) > 0.5
    known = (~hole).astype(np.float32)
    if not known.any():
        return np.full_like(image, 0.5)

    out = image * known[..., None]
    while True:
        counts = ndimage.convolve(known, _NEIGHBORHOOD, mode="constant")
        grow = (known == 0) & (counts > 0)
        if not grow.any():
            break
        for c in range(out.shape[2]):
            sums = ndimage.convolve(out[..., c] * known, _NEIGHBORHOOD, mode="constant")
            out[grow, c] = sums[grow] / counts[grow]
        known[grow] = 1.0

    for _ in range(smooth_passes):
        blurred = np.stack(
            [ndimage.convolve(out[..., c], _NEIGHBORHOOD / 9.0, mode="nearest")
             for c in range(out.shape[2])], axis=-1)
        out[hole] = blurred[hole]
    out[~hole] = image[~hole]
    return np.clip(out, 0.0, 1.0)
