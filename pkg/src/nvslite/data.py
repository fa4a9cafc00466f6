"""Corpus ingestion, file formats, and synthetic test scenes.

Directory layout: ``{root}/rgb/*.png|jpg``, ``{root}/depth/*.nvsd|*.png``,
optional ``{root}/pose/*.txt`` with 12 floats (row-major [R|t]) for frozen
evaluation poses. Depth and shift maps use raw little-endian float32
containers ("NVSD"/"NVSS" magics) so supervision targets are never
quantized; 16-bit depth PNGs are accepted with a ``<file>.scale`` sidecar
holding the metric scale factor.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Extrinsics
from .warp import RGBDFrame

NVSD_MAGIC = b"NVSD"  # depth: magic, u32 H, u32 W, then H*W float32
NVSS_MAGIC = b"NVSS"  # shift: magic, u32 H, u32 W, u32 C, then C planes of H*W float32

RGB_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class SampleRecord:
    image_path: Path
    depth_path: Path
    pose_path: Path | None = None


def save_depth_raw(path, depth: np.ndarray) -> None:
    depth = np.ascontiguousarray(depth, dtype="<f4")
    if depth.ndim != 2:
        raise ValueError(f"depth must be 2-D, got shape {depth.shape}")
    with open(path, "wb") as f:
        f.write(NVSD_MAGIC)
        f.write(struct.pack("<II", depth.shape[0], depth.shape[1]))
        f.write(depth.tobytes())


def load_depth_raw(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(12)
        if len(header) != 12 or header[:4] != NVSD_MAGIC:
            raise ValueError(f"{path}: not an NVSD depth container")
        h, w = struct.unpack("<II", header[4:])
        data = np.frombuffer(f.read(h * w * 4), dtype="<f4")
    if data.size != h * w:
        raise ValueError(f"{path}: truncated depth payload")
    return data.reshape(h, w).astype(np.float32)


def save_shift_raw(path, shift: np.ndarray) -> None:
    """Plane-major float32 container for shift maps (and other plane stacks)."""
    shift = np.ascontiguousarray(shift, dtype="<f4")
    if shift.ndim != 3:
        raise ValueError(f"expected (H, W, C), got shape {shift.shape}")
    h, w, c = shift.shape
    with open(path, "wb") as f:
        f.write(NVSS_MAGIC)
        f.write(struct.pack("<III", h, w, c))
        f.write(shift.transpose(2, 0, 1).tobytes())


def load_shift_raw(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16 or header[:4] != NVSS_MAGIC:
            raise ValueError(f"{path}: not an NVSS shift container")
        h, w, c = struct.unpack("<III", header[4:])
        data = np.frombuffer(f.read(h * w * c * 4), dtype="<f4")
    if data.size != h * w * c:
        raise ValueError(f"{path}: truncated shift payload")
    return data.reshape(c, h, w).transpose(1, 2, 0).astype(np.float32)


def save_image_png(path, image: np.ndarray) -> None:
    """Quantize a [0,1] float image (HxW or HxWx3) to 8-bit PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return rgb


def _load_depth_png(path) -> np.ndarray:
    with Image.open(path) as im:
        raw = np.asarray(im, dtype=np.float32)
    if raw.ndim != 2:
        raise ValueError(f"{path}: depth PNG must be single-channel")
    scale_path = Path(str(path) + ".scale")
    scale = float(scale_path.read_text().strip()) if scale_path.exists() else 1.0
    return raw * scale


def save_depth_png(path, depth_raw_u16: np.ndarray, scale: float) -> None:
    """16-bit depth PNG with its metric-scale sidecar."""
    Image.fromarray(depth_raw_u16.astype(np.uint16)).save(path)
    Path(str(path) + ".scale").write_text(f"{scale}\n")


def load_sample(rec: SampleRecord) -> RGBDFrame:
    """Load an RGB/depth pair, clamping non-positive depth to the 1st
    percentile of the positive values."""
    rgb = load_image(rec.image_path)
    depth_path = Path(rec.depth_path)
    if depth_path.suffix == ".nvsd":
        depth = load_depth_raw(depth_path)
    else:
        depth = _load_depth_png(depth_path)
    if depth.shape != rgb.shape[:2]:
        raise ValueError(
            f"resolution mismatch: rgb {rgb.shape[:2]} vs depth {depth.shape} "
            f"({rec.image_path} / {rec.depth_path})")
    positive = depth[depth > 0]
    if positive.size == 0:
        raise ValueError(f"{rec.depth_path}: depth map has no positive values")
    floor = np.percentile(positive, 1.0)
    depth = np.where(depth > 0, depth, floor).astype(np.float32)
    return RGBDFrame(rgb=rgb, depth=depth)


def load_pose(path) -> Extrinsics:
    values = np.loadtxt(path, dtype=np.float64).reshape(-1)
    if values.size != 12:
        raise ValueError(f"{path}: pose file must hold 12 floats, got {values.size}")
    return Extrinsics.from_flat(values)


def save_pose(path, T: Extrinsics) -> None:
    np.savetxt(path, T.flattened()[None, :], fmt="%.9g")


def discover(root) -> list[SampleRecord]:
    """Enumerate samples under the standard directory layout."""
    root = Path(root)
    rgb_dir, depth_dir, pose_dir = root / "rgb", root / "depth", root / "pose"
    if not rgb_dir.is_dir():
        raise FileNotFoundError(f"{rgb_dir} does not exist")
    records = []
    for image_path in sorted(p for p in rgb_dir.iterdir()
                             if p.suffix.lower() in RGB_SUFFIXES):
        stem = image_path.stem
        depth_path = None
        for cand in (depth_dir / f"{stem}.nvsd", depth_dir / f"{stem}.png"):
            if cand.exists():
                depth_path = cand
                break
        if depth_path is None:
            raise FileNotFoundError(f"no depth map for {image_path}")
        pose_path = pose_dir / f"{stem}.txt"
        records.append(SampleRecord(
            image_path=image_path, depth_path=depth_path,
            pose_path=pose_path if pose_path.exists() else None))
    return records


def synth_scene(kind: str, size: int, seed: int) -> RGBDFrame:
    """Deterministic textured test scene with a chosen depth topology.

    ``plane``: constant depth 1. ``step``: a foreground strip at depth 1
    over a background at depth 2. ``gradient``: linear ramp 1..3 across x.
    """
    if size < 4:
        raise ValueError(f"size must be >= 4, got {size}")
    rng = np.random.default_rng(seed)
    # low-frequency random color field, bilinearly upsampled for texture
    coarse = rng.uniform(0.05, 0.95, size=(4, 4, 3)).astype(np.float32)
    ys = np.linspace(0, 3, size, dtype=np.float32)
    xs = np.linspace(0, 3, size, dtype=np.float32)
    y0 = np.clip(np.floor(ys).astype(int), 0, 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, 2)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    rgb = ((1 - wy) * (1 - wx) * coarse[y0][:, x0]
           + (1 - wy) * wx * coarse[y0][:, x0 + 1]
           + wy * (1 - wx) * coarse[y0 + 1][:, x0]
           + wy * wx * coarse[y0 + 1][:, x0 + 1])
    rgb += rng.uniform(-0.04, 0.04, size=rgb.shape).astype(np.float32)
    rgb = np.clip(rgb, 0.0, 1.0).astype(np.float32)

    if kind == "plane":
        depth = np.ones((size, size), dtype=np.float32)
    elif kind == "step":
        depth = np.full((size, size), 2.0, dtype=np.float32)
        depth[:, size // 4: size // 2] = 1.0
    elif kind == "gradient":
        depth = np.broadcast_to(
            np.linspace(1.0, 3.0, size, dtype=np.float32)[None, :],
            (size, size)).copy()
    else:
        raise ValueError(f"unknown scene kind {kind!r}")
    return RGBDFrame(rgb=rgb, depth=depth)
