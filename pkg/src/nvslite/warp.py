"""Depth-based 3D warping: the training-label generator and grid sampler.

``forward_warp`` is the conventional warping reference: unproject every
source pixel with its depth, move it through the relative pose, splat it to
the nearest target pixel with a z-buffer. Its outputs (backward shift map,
binary occlusion mask, warped colors) are the supervision targets for the
learned decoders. Everything runs in float32 with a fixed per-pixel
operation order so alternative backends can match it bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .geometry import Extrinsics, Intrinsics

HOLE_DEPTH = np.finfo(np.float32).max

InpaintTeacher = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class RGBDFrame:
    """An RGB image in [0,1] with an aligned, strictly positive depth map."""

    rgb: np.ndarray    # (H, W, 3) float32
    depth: np.ndarray  # (H, W) float32

    def __post_init__(self):
        rgb = np.asarray(self.rgb, dtype=np.float32)
        depth = np.asarray(self.depth, dtype=np.float32)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ValueError(f"rgb must be (H, W, 3), got {rgb.shape}")
        if depth.shape != rgb.shape[:2]:
            raise ValueError(f"depth shape {depth.shape} does not match rgb {rgb.shape[:2]}")
        if rgb.min() < 0 or rgb.max() > 1:
            raise ValueError("rgb values must lie in [0, 1]")
        if not (depth > 0).all():
            raise ValueError("depth must be strictly positive everywhere")
        self.rgb = rgb
        self.depth = depth

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    def median_depth(self) -> float:
        return float(np.median(self.depth))


@dataclass
class WarpLabels:
    """Ground-truth bundle produced by forward warping one frame."""

    shift: np.ndarray         # (H, W, 2) backward offsets, zero at holes
    mask: np.ndarray          # (H, W) in {0, 1}: 1 = visible from source
    warped_rgb: np.ndarray    # (H, W, 3), zero at holes
    target_depth: np.ndarray  # (H, W), HOLE_DEPTH sentinel at holes


@dataclass
class TrainingSample:
    """One on-the-fly supervision tuple: inputs, pose, and all GT targets."""

    frame: RGBDFrame
    pose: Extrinsics
    intrinsics: Intrinsics
    shift: np.ndarray       # (H, W, 2)
    mask: np.ndarray        # (H, W)
    inpaint: np.ndarray     # (H, W, 3) teacher fill, defined everywhere
    target: np.ndarray      # (H, W, 3) blended target view


def forward_warp(frame: RGBDFrame, T: Extrinsics, K: Intrinsics) -> WarpLabels:
    """Splat the source frame into the target camera with a z-buffer.

    Collisions resolve to the candidate with minimum target depth, ties to
    the smaller source raster index, which makes the result independent of
    evaluation order. The stored shift is the backward offset ``source_pixel
    - target_pixel``, i.e. exactly what the grid sampler needs to pull the
    same color back out.
    """
    H, W = frame.depth.shape
    fx, fy = np.float32(K.fx), np.float32(K.fy)
    cx, cy = np.float32(K.cx), np.float32(K.cy)
    R = T.R.astype(np.float32)
    t = T.t.astype(np.float32)

    xs, ys = np.meshgrid(np.arange(W, dtype=np.float32),
                         np.arange(H, dtype=np.float32))
    d = frame.depth
    X = (xs - cx) * d / fx
    Y = (ys - cy) * d / fy
    Z = d
    Xp = R[0, 0] * X + R[0, 1] * Y + R[0, 2] * Z + t[0]
    Yp = R[1, 0] * X + R[1, 1] * Y + R[1, 2] * Z + t[1]
    Zp = R[2, 0] * X + R[2, 1] * Y + R[2, 2] * Z + t[2]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        u = fx * Xp / Zp + cx
        v = fy * Yp / Zp + cy
        qxf = np.floor(u + np.float32(0.5))
        qyf = np.floor(v + np.float32(0.5))
        valid = (Zp > 0) & (qxf >= 0) & (qxf <= W - 1) & (qyf >= 0) & (qyf <= H - 1)

    src_idx = np.flatnonzero(valid)
    qx = qxf[valid].astype(np.int64)
    qy = qyf[valid].astype(np.int64)
    z = Zp[valid]
    qlin = qy * W + qx

    # Lexicographic (target pixel, depth, source index) ordering: the first
    # candidate per target pixel is the z-buffer winner under the total
    # tie-break, regardless of how candidates were enumerated.
    order = np.lexsort((src_idx, z, qlin))
    qlin_sorted = qlin[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = qlin_sorted[1:] != qlin_sorted[:-1]
    win = order[first]

    shift = np.zeros((H, W, 2), dtype=np.float32)
    mask = np.zeros((H, W), dtype=np.float32)
    warped = np.zeros((H, W, 3), dtype=np.float32)
    tdepth = np.full((H, W), HOLE_DEPTH, dtype=np.float32)

    wq = qlin[win]
    ws = src_idx[win]
    sy, sx = np.divmod(ws, W)
    ty, tx = np.divmod(wq, W)
    mask.flat[wq] = 1.0
    shift.reshape(-1, 2)[wq, 0] = (sx - tx).astype(np.float32)
    shift.reshape(-1, 2)[wq, 1] = (sy - ty).astype(np.float32)
    warped.reshape(-1, 3)[wq] = frame.rgb.reshape(-1, 3)[ws]
    tdepth.flat[wq] = z[win]
    return WarpLabels(shift=shift, mask=mask, warped_rgb=warped, target_depth=tdepth)


def grid_sample(image, shift, border: str = "clamp"):
    """Bilinearly sample ``image`` at ``pixel + shift`` per target pixel.

    ``image`` is (H, W, C), ``shift`` is (H, W, 2) in pixels. Out-of-bounds
    taps are clamped to the border (``clamp``) or contribute zero
    (``zeros``). Accepts numpy arrays or torch tensors; the torch path is
    differentiable with respect to both the image and the shift.
    """
    if border not in ("clamp", "zeros"):
        raise ValueError(f"unknown border mode {border!r}")
    is_numpy = isinstance(image, np.ndarray)
    img = torch.from_numpy(image) if is_numpy else image
    off = torch.from_numpy(shift) if isinstance(shift, np.ndarray) else shift
    if img.shape[:2] != off.shape[:2] or off.shape[2] != 2:
        raise ValueError(f"image {tuple(img.shape)} and shift {tuple(off.shape)} disagree")
    out = _grid_sample_torch(img, off, border)
    return out.numpy() if is_numpy else out


def _grid_sample_torch(image: torch.Tensor, shift: torch.Tensor, border: str) -> torch.Tensor:
    H, W, _ = image.shape
    ys, xs = torch.meshgrid(torch.arange(H, dtype=image.dtype),
                            torch.arange(W, dtype=image.dtype), indexing="ij")
    sx = xs + shift[..., 0]
    sy = ys + shift[..., 1]
    x0 = torch.floor(sx)
    y0 = torch.floor(sy)
    fx = sx - x0
    fy = sy - y0

    taps = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            w = (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
            if border == "zeros":
                inside = (xi >= 0) & (xi <= W - 1) & (yi >= 0) & (yi <= H - 1)
                w = w * inside.to(w.dtype)
            xi = xi.clamp(0, W - 1).long()
            yi = yi.clamp(0, H - 1).long()
            taps.append(w.unsqueeze(-1) * image[yi, xi])
    return taps[0] + taps[1] + taps[2] + taps[3]


def make_labels(frame: RGBDFrame, T: Extrinsics, K: Intrinsics,
                teacher: InpaintTeacher, warp_fn=None) -> TrainingSample:
    """Generate one supervision tuple: warp labels plus teacher inpainting.

    The teacher sees the warped image with holes and returns a full fill;
    the blended target is the warped content where visible and the fill in
    the holes, mirroring what the learned pipeline must reproduce.
    ``warp_fn`` swaps in an alternative forward-warp backend.
    """
    labels = (warp_fn or forward_warp)(frame, T, K)
    hole = 1.0 - labels.mask
    inpaint = np.asarray(teacher(labels.warped_rgb, hole), dtype=np.float32)
    if inpaint.shape != labels.warped_rgb.shape:
        raise ValueError(f"teacher returned shape {inpaint.shape}, expected {labels.warped_rgb.shape}")
    m = labels.mask[..., None]
    target = labels.warped_rgb * m + inpaint * (1.0 - m)
    return TrainingSample(frame=frame, pose=T, intrinsics=K,
                          shift=labels.shift, mask=labels.mask,
                          inpaint=inpaint, target=np.clip(target, 0.0, 1.0))
