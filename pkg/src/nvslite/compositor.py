"""Target-view blending: warped content where visible, inpainting in holes."""

from __future__ import annotations

import numpy as np
import torch

from .warp import grid_sample


def synthesize(source, shift, mask, inpaint, border: str = "clamp"):
    """Blend ``grid_sample(source, shift) * mask + inpaint * (1 - mask)``.

    ``mask`` is (H, W) in [0, 1] and broadcasts over channels; it is applied
    as a soft weight so gradients keep flowing to the mask predictor during
    training (binarize only for visualization). Output is clamped to [0, 1].
    Accepts numpy arrays or torch tensors; the torch path is differentiable
    end to end.
    """
    is_numpy = isinstance(source, np.ndarray)

    def as_tensor(a):
        return torch.from_numpy(a) if isinstance(a, np.ndarray) else a

    src, off, m, fill = map(as_tensor, (source, shift, mask, inpaint))
    if src.shape != fill.shape or m.shape != src.shape[:2]:
        raise ValueError(
            f"shape mismatch: source {tuple(src.shape)}, inpaint {tuple(fill.shape)}, "
            f"mask {tuple(m.shape)}")
    if m.min() < 0 or m.max() > 1:
        raise ValueError("mask values must lie in [0, 1]")
    warped = grid_sample(src, off, border=border)
    m = m.unsqueeze(-1)
    out = (warped * m + fill * (1 - m)).clamp(0.0, 1.0)
    return out.numpy() if is_numpy else out
