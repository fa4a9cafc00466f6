"""Multi-stage training with on-the-fly label generation.

Flow and mask decoders train from epoch 0; the inpainting term switches on
at ``activation_epoch`` once warping supplies sensible masks. Supervision
is regenerated every epoch: each (seed, epoch, sample) triple derives its
own pose and augmentation stream, so labels stay fresh and runs are
reproducible regardless of iteration order.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import Intrinsics, PoseSamplerConfig, sample_pose
from .model import ModelConfig, NVSModel, pose_input, rgbd_input, save_checkpoint
from .teachers import neighborhood_fill
from .warp import RGBDFrame, forward_warp, make_labels

LOG_COLUMNS = ["epoch", "L_flow", "L_mask", "L_inpaint", "lambda1", "lambda2", "lambda3"]


class NonFiniteLossError(RuntimeError):
    def __init__(self, components):
        super().__init__(f"non-finite training loss: {components}")
        self.components = components


@dataclass(frozen=True)
class LossSchedule:
    activation_epoch: int = 5
    inpaint_weight: float = 1.0
    mask_weight: float = 1.0
    flow_weight: float = 1.0


def lambda_schedule(epoch: int, sched: LossSchedule):
    """(inpaint, mask, flow) loss weights for the given epoch."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < sched.activation_epoch:
        return 0.0, sched.mask_weight, sched.flow_weight
    return sched.inpaint_weight, sched.mask_weight, sched.flow_weight


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-4
    batch_size: int = 32
    crop: int = 224
    hflip: bool = True
    seed: int = 0
    warp_backend: str = "reference"
    inpaint_full_image: bool = False  # ablation: L1 everywhere, not just holes

    def __post_init__(self):
        if self.warp_backend not in ("reference", "native"):
            raise ValueError(f"unknown warp backend {self.warp_backend!r}")


def _masked_l1(pred, gt, weight):
    total = weight.sum() * pred.shape[1]
    if total == 0:
        return pred.sum() * 0.0
    return ((pred - gt).abs() * weight).sum() / total


def loss_total(pred: dict, gt: dict, lambdas, inpaint_full_image: bool = False,
               extra_inpaint_losses=()):
    """Composite loss and its components.

    Flow L1 is averaged over visible pixels (where the shift is defined),
    inpainting L1 over hole pixels (where the fill shows through the
    blend) unless ``inpaint_full_image``; mask loss is mean binary
    cross-entropy on logits. When the inpainting weight is zero that whole
    branch is skipped, so its exclusive parameters receive no gradient.
    """
    l_inp_w, l_mask_w, l_flow_w = lambdas
    m = gt["mask"]
    l_flow = _masked_l1(pred["shift"], gt["shift"], m)
    l_mask = F.binary_cross_entropy_with_logits(pred["mask_logits"], m)
    total = l_mask_w * l_mask + l_flow_w * l_flow

    if l_inp_w != 0.0:
        if inpaint_full_image:
            l_inpaint = (pred["inpaint"] - gt["inpaint"]).abs().mean()
        else:
            l_inpaint = _masked_l1(pred["inpaint"], gt["inpaint"], 1.0 - m)
        for fn in extra_inpaint_losses:
            l_inpaint = l_inpaint + fn(pred["inpaint"], gt["inpaint"])
        total = total + l_inp_w * l_inpaint
        l_inpaint_val = float(l_inpaint.detach())
    else:
        with torch.no_grad():
            if inpaint_full_image:
                l_inpaint_val = float((pred["inpaint"] - gt["inpaint"]).abs().mean())
            else:
                l_inpaint_val = float(_masked_l1(pred["inpaint"], gt["inpaint"], 1.0 - m))

    components = {"L_flow": float(l_flow.detach()), "L_mask": float(l_mask.detach()),
                  "L_inpaint": l_inpaint_val, "L_total": float(total.detach())}
    return total, components


def train_step(batch: dict, model: NVSModel, optimizer, lambdas,
               inpaint_full_image: bool = False, extra_inpaint_losses=()):
    """One gradient step on a prepared batch; returns component losses."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    pred = model(batch["rgbd"], batch["pose"])
    total, components = loss_total(
        pred, batch, lambdas, inpaint_full_image=inpaint_full_image,
        extra_inpaint_losses=extra_inpaint_losses)
    if not math.isfinite(components["L_total"]):
        raise NonFiniteLossError(components)
    total.backward()
    optimizer.step()
    return components


def augment(frame: RGBDFrame, crop: int, hflip: bool, rng) -> RGBDFrame:
    """Seeded random crop and horizontal flip."""
    h, w = frame.depth.shape
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} exceeds frame {h}x{w}")
    y0 = int(rng.integers(0, h - crop + 1))
    x0 = int(rng.integers(0, w - crop + 1))
    rgb = frame.rgb[y0:y0 + crop, x0:x0 + crop]
    depth = frame.depth[y0:y0 + crop, x0:x0 + crop]
    if hflip and rng.uniform() < 0.5:
        rgb, depth = rgb[:, ::-1], depth[:, ::-1]
    return RGBDFrame(rgb=np.ascontiguousarray(rgb), depth=np.ascontiguousarray(depth))


def _resolve_warp_fn(backend: str):
    if backend == "native":
        from .native import forward_warp_native
        return forward_warp_native
    return forward_warp


def generate_sample(frame: RGBDFrame, cfg: TrainConfig, pose_cfg: PoseSamplerConfig,
                    epoch: int, index: int, teacher, warp_fn=forward_warp):
    """Deterministic per-(seed, epoch, index) supervision tuple."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, index]))
    view = augment(frame, cfg.crop, cfg.hflip, rng)
    K = Intrinsics.default(view.width, view.height)
    pose = sample_pose(pose_cfg, view.median_depth(), rng=rng)
    return make_labels(view, pose, K, teacher, warp_fn=warp_fn)


def _collate(samples) -> dict:
    rgbd = torch.stack([rgbd_input(s.frame) for s in samples])
    pose = torch.stack([pose_input(s.pose) for s in samples])
    shift = torch.stack([torch.from_numpy(s.shift.transpose(2, 0, 1)) for s in samples])
    mask = torch.stack([torch.from_numpy(s.mask[None]) for s in samples])
    inpaint = torch.stack([torch.from_numpy(s.inpaint.transpose(2, 0, 1)) for s in samples])
    return {"rgbd": rgbd, "pose": pose, "shift": shift, "mask": mask, "inpaint": inpaint}


def fit(dataset, model: NVSModel, cfg: TrainConfig,
        pose_cfg: PoseSamplerConfig | None = None, teacher=neighborhood_fill,
        schedule: LossSchedule | None = None, out_dir=None,
        extra_inpaint_losses=(), log_hook=None):
    """Train on a list of RGBD frames; returns (metric rows, checkpoint path).

    Writes ``metrics.csv`` and ``checkpoint.cnvs`` under ``out_dir`` when
    given. On a non-finite loss the run aborts after dumping a diagnostic
    snapshot next to the log.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if cfg.crop % model.config.stride:
        raise ValueError(f"crop {cfg.crop} not divisible by encoder stride {model.config.stride}")
    pose_cfg = pose_cfg or PoseSamplerConfig(seed=cfg.seed)
    schedule = schedule or LossSchedule()
    warp_fn = _resolve_warp_fn(cfg.warp_backend)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rows = []
    start = time.monotonic()
    for epoch in range(cfg.epochs):
        lambdas = lambda_schedule(epoch, schedule)
        order = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, epoch, len(dataset)])).permutation(len(dataset))
        sums = {"L_flow": 0.0, "L_mask": 0.0, "L_inpaint": 0.0}
        batches = 0
        for lo in range(0, len(order), cfg.batch_size):
            idxs = order[lo:lo + cfg.batch_size]
            samples = [
                generate_sample(dataset[i], cfg, pose_cfg, epoch, int(i), teacher, warp_fn)
                for i in idxs
            ]
            try:
                components = train_step(
                    _collate(samples), model, optimizer, lambdas,
                    inpaint_full_image=cfg.inpaint_full_image,
                    extra_inpaint_losses=extra_inpaint_losses)
            except NonFiniteLossError as err:
                if out_dir is not None:
                    snapshot = {"epoch": epoch, "batch_start": int(lo),
                                "components": err.components,
                                "lambdas": list(lambdas)}
                    (out_dir / "abort_snapshot.json").write_text(json.dumps(snapshot, indent=2))
                raise
            for k in sums:
                sums[k] += components[k]
            batches += 1
        row = {"epoch": epoch,
               "L_flow": sums["L_flow"] / batches,
               "L_mask": sums["L_mask"] / batches,
               "L_inpaint": sums["L_inpaint"] / batches,
               "lambda1": lambdas[0], "lambda2": lambdas[1], "lambda3": lambdas[2]}
        rows.append(row)
        if log_hook is not None:
            log_hook(row)

    ckpt_path = None
    if out_dir is not None:
        with open(out_dir / "metrics.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
        ckpt_path = out_dir / "checkpoint.cnvs"
        save_checkpoint(ckpt_path, model, extra={
            "epochs": cfg.epochs, "seed": cfg.seed,
            "train_seconds": f"{time.monotonic() - start:.1f}"})
    return rows, ckpt_path


# -- optional inpainting loss plug-ins --------------------------------------


def ssim_loss(pred: torch.Tensor, gt: torch.Tensor, window: int = 11,
              sigma: float = 1.5) -> torch.Tensor:
    """1 - mean SSIM, Gaussian-windowed, on (B, C, H, W) tensors."""
    ax = torch.arange(window, dtype=pred.dtype) - (window - 1) / 2.0
    g = torch.exp(-(ax ** 2) / (2 * sigma ** 2))
    win2d = (g[:, None] * g[None, :]) / (g.sum() ** 2)
    c = pred.shape[1]
    kernel = win2d.expand(c, 1, window, window)

    def filt(x):
        return F.conv2d(x, kernel, groups=c)

    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu_p, mu_g = filt(pred), filt(gt)
    var_p = filt(pred * pred) - mu_p ** 2
    var_g = filt(gt * gt) - mu_g ** 2
    cov = filt(pred * gt) - mu_p * mu_g
    num = (2 * mu_p * mu_g + c1) * (2 * cov + c2)
    den = (mu_p ** 2 + mu_g ** 2 + c1) * (var_p + var_g + c2)
    return 1.0 - (num / den).mean()


def focal_frequency_loss(pred: torch.Tensor, gt: torch.Tensor,
                         alpha: float = 1.0) -> torch.Tensor:
    """Frequency-domain L2 reweighted toward the hardest frequencies."""
    fp = torch.fft.fft2(pred, norm="ortho")
    fg = torch.fft.fft2(gt, norm="ortho")
    dist = (fp - fg).abs() ** 2
    with torch.no_grad():
        weight = dist.sqrt() ** alpha
        peak = weight.amax(dim=(-2, -1), keepdim=True).clamp(min=1e-8)
        weight = weight / peak
    return (weight * dist).mean()


class PerceptualLoss:
    """L1 in a user-supplied feature space; disabled unless constructed."""

    def __init__(self, feature_extractor):
        self.feature_extractor = feature_extractor

    def __call__(self, pred, gt):
        return (self.feature_extractor(pred) - self.feature_extractor(gt)).abs().mean()


EXTRA_LOSS_REGISTRY = {"ssim": ssim_loss, "ffl": focal_frequency_loss}


# -- skip-connection ablation harness ---------------------------------------

SKIP_ABLATION_CONFIGS = {
    "no_skips": frozenset(),
    "skips_all": frozenset({"flow", "mask", "inpaint"}),
    "skips_mask_inpaint": frozenset({"mask", "inpaint"}),
}


def run_skip_ablation(dataset, model_cfg: ModelConfig, cfg: TrainConfig,
                      pose_cfg: PoseSamplerConfig | None = None,
                      teacher=neighborhood_fill, eval_seed: int = 0,
                      out_csv=None):
    """Train one model per skip wiring and tabulate eval metrics.

    The interesting orderings only emerge at corpus scale; this harness
    asserts nothing about them, it just verifies the wiring and reports.
    """
    from .metrics import evaluate

    results = []
    for name, targets in SKIP_ABLATION_CONFIGS.items():
        torch.manual_seed(cfg.seed)
        model = NVSModel(replace(model_cfg, skip_targets=targets))
        wiring = model.skip_wiring()
        assert {k for k, v in wiring.items() if v} == set(targets)
        fit(dataset, model, cfg, pose_cfg=pose_cfg, teacher=teacher)
        report = evaluate(model, dataset, seed=eval_seed, pose_cfg=pose_cfg,
                          teacher=teacher)
        results.append({
            "config": name,
            "skip_flow": wiring["flow"],
            "skip_mask": wiring["mask"],
            "skip_inpaint": wiring["inpaint"],
            "warp_psnr": report["warping"]["psnr"],
            "warp_ssim": report["warping"]["ssim"],
            "inpaint_psnr": report["inpainting"]["psnr"],
            "inpaint_ssim": report["inpainting"]["ssim"],
            "mask_iou": report["mask_iou"],
        })
    if out_csv is not None:
        with open(out_csv, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(results[0]))
            writer.writeheader()
            writer.writerows(results)
    return results
