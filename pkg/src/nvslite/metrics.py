"""Image quality metrics and the two-column evaluation protocol.

The report splits quality the same way the pipeline splits work: a
"warping" column comparing masked warped content against the conventional
warping ground truth, and an "inpainting" column comparing the full blended
synthesis against the composed ground-truth target. A perceptual metric
(e.g. LPIPS) is a plug-in: pass a callable and its column appears,
otherwise it is marked absent.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.signal import convolve2d

from .compositor import synthesize
from .geometry import Intrinsics, PoseSamplerConfig, sample_pose
from .teachers import neighborhood_fill
from .warp import grid_sample, make_labels

PSNR_CAP_DB = 100.0
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)  # Rec.601
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


_WINDOW = _gaussian_window()


def psnr(a: np.ndarray, b: np.ndarray, region: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images, capped at 100.

    ``region`` optionally restricts the MSE to a boolean pixel subset.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if region is not None:
        if not region.any():
            return PSNR_CAP_DB
        a, b = a[region], b[region]
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def _to_luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img @ _LUMA
    return img


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM over luma with an 11x11 Gaussian window."""
    x, y = _to_luma(a), _to_luma(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if min(x.shape) < 11:
        raise ValueError(f"images must be at least 11x11, got {x.shape}")
    mu_x = convolve2d(x, _WINDOW, mode="valid")
    mu_y = convolve2d(y, _WINDOW, mode="valid")
    xx = convolve2d(x * x, _WINDOW, mode="valid") - mu_x ** 2
    yy = convolve2d(y * y, _WINDOW, mode="valid") - mu_y ** 2
    xy = convolve2d(x * y, _WINDOW, mode="valid") - mu_x * mu_y
    num = (2 * mu_x * mu_y + _C1) * (2 * xy + _C2)
    den = (mu_x ** 2 + mu_y ** 2 + _C1) * (xx + yy + _C2)
    return float(np.mean(num / den))


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary maps; empty union counts as 1."""
    a = np.asarray(a) > 0.5
    b = np.asarray(b) > 0.5
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def evaluate(model, frames, poses=None, seed: int = 0, pose_cfg=None,
             teacher=neighborhood_fill, perceptual_metric=None) -> dict:
    """Aggregate warping and inpainting quality over an evaluation set.

    ``frames`` is a list of RGBDFrame; ``poses`` either a parallel list of
    Extrinsics (frozen sidecar poses) or None to draw them deterministically
    from ``seed``. ``model`` needs a ``predict(frame, T) -> dict`` method;
    pass None for the oracle passthrough (ground truth scored against
    itself, the self-consistency check).

    Warping compares the resampled source under the predicted shift, masked
    by the binarized predicted mask, against the masked warping ground
    truth, restricted to the jointly-valid region (visible under both
    masks) so hole pixels pollute neither side and the column isolates
    warp quality; mask quality is scored separately as IoU. Inpainting
    compares the full blended synthesis (soft mask, as produced) against
    the composed target.
    """
    if poses is None:
        base = pose_cfg or PoseSamplerConfig()
        poses = [
            sample_pose(base, frames[i].median_depth(),
                        rng=np.random.default_rng(np.random.SeedSequence([seed, i])))
            for i in range(len(frames))
        ]
    if len(poses) != len(frames):
        raise ValueError("frames and poses must have equal length")

    cols = {"warping": {"psnr": [], "ssim": []}, "inpainting": {"psnr": [], "ssim": []}}
    if perceptual_metric is not None:
        cols["warping"]["lpips"] = []
        cols["inpainting"]["lpips"] = []
    mask_ious, hole_ious = [], []

    for frame, T in zip(frames, poses):
        K = Intrinsics.default(frame.width, frame.height)
        gt = make_labels(frame, T, K, teacher)
        if model is None:
            pred = {"shift": gt.shift, "mask": gt.mask, "inpaint": gt.inpaint}
        else:
            pred = model.predict(frame, T)

        pred_bin = (pred["mask"] >= 0.5).astype(np.float32)
        warped_pred = grid_sample(frame.rgb, pred["shift"]) * pred_bin[..., None]
        # at a binary GT mask the composed target equals the warped content
        # wherever visible, so target * mask is the masked warping GT
        gt_masked = gt.target * gt.mask[..., None]
        region = (pred_bin > 0.5) & (gt.mask > 0.5)
        both = region[..., None].astype(np.float32)
        cols["warping"]["psnr"].append(psnr(warped_pred * both, gt_masked * both,
                                            region=region))
        cols["warping"]["ssim"].append(ssim(warped_pred * both, gt_masked * both))

        synth = synthesize(frame.rgb, pred["shift"], pred["mask"], pred["inpaint"])
        cols["inpainting"]["psnr"].append(psnr(synth, gt.target))
        cols["inpainting"]["ssim"].append(ssim(synth, gt.target))

        if perceptual_metric is not None:
            cols["warping"]["lpips"].append(float(perceptual_metric(warped_pred, gt_masked)))
            cols["inpainting"]["lpips"].append(float(perceptual_metric(synth, gt.target)))

        mask_ious.append(iou(pred_bin, gt.mask))
        hole_ious.append(iou(1 - pred_bin, 1 - gt.mask))

    report = {
        "warping": {k: float(np.mean(v)) for k, v in cols["warping"].items()},
        "inpainting": {k: float(np.mean(v)) for k, v in cols["inpainting"].items()},
        "mask_iou": float(np.mean(mask_ious)),
        "hole_iou": float(np.mean(hole_ious)),
        "count": len(frames),
    }
    if perceptual_metric is None:
        report["warping"]["lpips"] = None
        report["inpainting"]["lpips"] = None
    return report


def format_report(report: dict) -> str:
    """Human-readable two-column table."""
    def fmt(v):
        return "absent" if v is None else f"{v:.4f}"

    lines = [
        f"{'':<12}{'LPIPS':>10}{'PSNR':>10}{'SSIM':>10}",
        f"{'Warping':<12}{fmt(report['warping']['lpips']):>10}"
        f"{report['warping']['psnr']:>10.3f}{report['warping']['ssim']:>10.4f}",
        f"{'Inpainting':<12}{fmt(report['inpainting']['lpips']):>10}"
        f"{report['inpainting']['psnr']:>10.3f}{report['inpainting']['ssim']:>10.4f}",
        f"mask IoU {report['mask_iou']:.4f}   hole IoU {report['hole_iou']:.4f}"
        f"   samples {report['count']}",
    ]
    return "\n".join(lines)
