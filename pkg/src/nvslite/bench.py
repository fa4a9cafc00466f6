"""Latency and structure measurements: sequential vs parallel decoding.

The sequential mode mirrors the classic pipeline (warp must be materialized
before inpainting starts); the parallel mode launches all three decoders
concurrently from the shared latent. Both must produce identical outputs;
only the schedule differs. Absolute timings are hardware-dependent and are
reported, never asserted.
"""

from __future__ import annotations

import hashlib
import statistics
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import psutil
import torch
from torch import nn

from .geometry import Extrinsics, Intrinsics, PoseSamplerConfig, sample_pose
from .model import NVSModel, pose_input, rgbd_input
from .warp import RGBDFrame, grid_sample

# Published runtime/memory targets for full-scale models of this family,
# carried in reports as context only; desk hardware cannot reproduce them.
REFERENCE_TARGETS = {"gpu_ms": 26.0, "mobile_ms": 33.0, "memory_gb": 0.14}

DEFAULT_RESOLUTIONS = ((224, 224), (512, 512), (762, 1008))


def pad_to_stride(frame: RGBDFrame, stride: int) -> RGBDFrame:
    """Edge-pad so both dimensions divide the encoder stride."""
    h, w = frame.depth.shape
    ph = (-h) % stride
    pw = (-w) % stride
    if ph == 0 and pw == 0:
        return frame
    pad = ((0, ph), (0, pw))
    return RGBDFrame(rgb=np.pad(frame.rgb, pad + ((0, 0),), mode="edge"),
                     depth=np.pad(frame.depth, pad, mode="edge"))


def _compose(rgb: torch.Tensor, shift: torch.Tensor, mask: torch.Tensor,
             inpaint: torch.Tensor) -> torch.Tensor:
    shift_hwc = shift[0].permute(1, 2, 0)
    warped = grid_sample(rgb, shift_hwc) * mask[0, 0].unsqueeze(-1)
    return warped + inpaint[0].permute(1, 2, 0) * (1 - mask[0, 0]).unsqueeze(-1)


def _run_once(model: NVSModel, rgb: torch.Tensor, x: torch.Tensor,
              p: torch.Tensor, mode: str):
    with torch.no_grad():
        features, skips = model.encode_rgbd(x)
        latent = model.fuse_latent(features, model.encode_extrinsics(p), skips)
        if mode == "sequential":
            shift = model.decode_flow(latent)
            mask = model.decode_mask(latent)
            # materialize the warped view before inpainting may start
            warped = grid_sample(rgb, shift[0].permute(1, 2, 0)) * mask[0, 0].unsqueeze(-1)
            inpaint = model.decode_inpaint(latent)
            out = warped + inpaint[0].permute(1, 2, 0) * (1 - mask[0, 0]).unsqueeze(-1)
        elif mode == "parallel":
            with ThreadPoolExecutor(max_workers=3) as pool:
                f_shift = pool.submit(model.decode_flow, latent)
                f_mask = pool.submit(model.decode_mask, latent)
                f_inpaint = pool.submit(model.decode_inpaint, latent)
                shift, mask, inpaint = f_shift.result(), f_mask.result(), f_inpaint.result()
            out = _compose(rgb, shift, mask, inpaint)
        else:
            raise ValueError(f"unknown mode {mode!r}")
    return shift, mask, inpaint, out


def output_hash(tensors) -> str:
    digest = hashlib.sha256()
    for t in tensors:
        digest.update(t.detach().numpy().tobytes())
    return digest.hexdigest()


def estimate_macs(model: NVSModel, height: int, width: int) -> int:
    """Multiply-accumulate count for one forward at the given resolution."""
    counts = []

    def hook(module, inputs, output):
        if isinstance(module, nn.Conv2d):
            kh, kw = module.kernel_size
            cin = module.in_channels // module.groups
            counts.append(output.numel() * cin * kh * kw)
        elif isinstance(module, nn.Linear):
            counts.append(output.numel() * module.in_features)

    handles = [m.register_forward_hook(hook) for m in model.modules()
               if isinstance(m, (nn.Conv2d, nn.Linear))]
    try:
        with torch.no_grad():
            model(torch.zeros(1, 4, height, width), torch.zeros(1, 12))
    finally:
        for h in handles:
            h.remove()
    return int(sum(counts))


def measure_pipeline(model: NVSModel, frame: RGBDFrame, T: Extrinsics,
                     mode: str = "parallel", runs: int = 10, warmup: int = 2) -> dict:
    """Time one execution mode; returns latency stats, op counts, and hash."""
    if runs < 10:
        raise ValueError("runs must be >= 10 for stable statistics")
    model.eval()
    frame = pad_to_stride(frame, model.config.stride)
    x = rgbd_input(frame)[None]
    p = pose_input(T)[None]
    rgb = torch.from_numpy(frame.rgb)

    process = psutil.Process()
    rss_before = process.memory_info().rss
    encoder_calls_before = model.rgbd_encoder.invocations
    for _ in range(warmup):
        outputs = _run_once(model, rgb, x, p, mode)
    encoder_calls = model.rgbd_encoder.invocations - encoder_calls_before
    per_call_encoder = encoder_calls // max(warmup, 1)

    timings = []
    rss_peak = rss_before
    for _ in range(runs):
        t0 = time.perf_counter()
        outputs = _run_once(model, rgb, x, p, mode)
        timings.append((time.perf_counter() - t0) * 1000.0)
        rss_peak = max(rss_peak, process.memory_info().rss)

    timings.sort()
    h, w = frame.depth.shape
    return {
        "mode": mode,
        "height": h,
        "width": w,
        "median_ms": statistics.median(timings),
        "p95_ms": timings[min(len(timings) - 1, int(round(0.95 * (len(timings) - 1))))],
        "peak_rss_delta_mb": (rss_peak - rss_before) / 1e6,
        "encoder_calls_per_run": per_call_encoder,
        "params": model.parameter_count(),
        "macs": estimate_macs(model, h, w),
        "output_hash": output_hash(outputs),
        "outputs": outputs,
    }


def bench_frame(height: int, width: int, seed: int = 0) -> RGBDFrame:
    """Synthetic textured frame with a depth ramp at an arbitrary size."""
    rng = np.random.default_rng(seed)
    rgb = rng.uniform(0.0, 1.0, size=(height, width, 3)).astype(np.float32)
    depth = np.broadcast_to(
        np.linspace(1.0, 2.5, width, dtype=np.float32)[None, :],
        (height, width)).copy()
    return RGBDFrame(rgb=rgb, depth=depth)


def run_bench(model: NVSModel, resolutions=DEFAULT_RESOLUTIONS, runs: int = 10,
              modes=("sequential", "parallel"), seed: int = 0) -> list[dict]:
    """Benchmark every (resolution, mode) pair; rows ready for CSV."""
    rows = []
    for height, width in resolutions:
        frame = bench_frame(height, width, seed=seed)
        T = sample_pose(PoseSamplerConfig(seed=seed), frame.median_depth())
        for mode in modes:
            result = measure_pipeline(model, frame, T, mode=mode, runs=runs)
            rows.append({
                "resolution": f"{height}x{width}",
                "padded": f"{result['height']}x{result['width']}",
                "mode": mode,
                "median_ms": round(result["median_ms"], 3),
                "p95_ms": round(result["p95_ms"], 3),
                "peak_rss_delta_mb": round(result["peak_rss_delta_mb"], 2),
                "encoder_calls_per_run": result["encoder_calls_per_run"],
                "params": result["params"],
                "macs": result["macs"],
                "output_hash": result["output_hash"][:16],
                "context_reference_gpu_ms": REFERENCE_TARGETS["gpu_ms"],
                "context_reference_memory_gb": REFERENCE_TARGETS["memory_gb"],
            })
    return rows


def format_bench(rows) -> str:
    header = f"{'resolution':>11} {'mode':>10} {'median_ms':>10} {'p95_ms':>9} " \
             f"{'enc/run':>7} {'params':>9} {'MACs':>13} {'hash':>16}"
    lines = [header]
    for r in rows:
        lines.append(
            f"{r['resolution']:>11} {r['mode']:>10} {r['median_ms']:>10.3f} "
            f"{r['p95_ms']:>9.3f} {r['encoder_calls_per_run']:>7} "
            f"{r['params']:>9} {r['macs']:>13} {r['output_hash']:>16}")
    lines.append(f"context: published full-scale reference targets "
                 f"{REFERENCE_TARGETS['gpu_ms']} ms GPU / "
                 f"{REFERENCE_TARGETS['memory_gb']} GB (not asserted)")
    return "\n".join(lines)
