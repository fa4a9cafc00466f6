"""ctypes binding to the optional native forward-warp kernel.

The kernel is a cdylib exposing one C symbol; build it with
``cargo build --release`` inside ``warp-kernel/``. Selection is by the
``warp_backend: reference | native`` config flag; when the library is
missing the native backend raises instead of silently falling back.
"""

from __future__ import annotations

import ctypes
import os
from pathlib import Path

import numpy as np

from .geometry import Extrinsics, Intrinsics
from .warp import RGBDFrame, WarpLabels

ENV_VAR = "NVSLITE_WARP_KERNEL"
_LIB_NAME = "libwarp_kernel.so"

_ERROR_MESSAGES = {
    1: "dimension mismatch between buffers and declared size",
    2: "null buffer pointer",
    3: "kernel panicked",
}


class NativeKernelError(RuntimeError):
    pass


def _candidate_paths():
    env = os.environ.get(ENV_VAR)
    if env:
        yield Path(env)
    here = Path(__file__).resolve()
    for base in (Path.cwd(), *here.parents):
        yield base / "warp-kernel" / "target" / "release" / _LIB_NAME


def find_library() -> Path | None:
    for path in _candidate_paths():
        if path.is_file():
            return path
    return None


_lib = None


def _load():
    global _lib
    if _lib is None:
        path = find_library()
        if path is None:
            raise NativeKernelError(
                f"native warp kernel not found; build warp-kernel/ with cargo "
                f"or point {ENV_VAR} at the library")
        lib = ctypes.CDLL(str(path))
        f32p = ctypes.POINTER(ctypes.c_float)
        lib.warp_forward.restype = ctypes.c_int32
        lib.warp_forward.argtypes = [
            f32p, f32p, f32p, f32p,            # rgb, depth, pose12, intrinsics6
            ctypes.c_uint32, ctypes.c_uint32,  # h, w
            f32p, f32p, f32p, f32p,            # shift, mask, warped, target_depth
        ]
        _lib = lib
    return _lib


def available() -> bool:
    return find_library() is not None


def forward_warp_native(frame: RGBDFrame, T: Extrinsics, K: Intrinsics) -> WarpLabels:
    """Drop-in forward_warp with bit-identical outputs to the reference."""
    lib = _load()
    h, w = frame.depth.shape
    rgb = np.ascontiguousarray(frame.rgb, dtype=np.float32)
    depth = np.ascontiguousarray(frame.depth, dtype=np.float32)
    pose = np.ascontiguousarray(T.flattened(), dtype=np.float32)
    intr = np.array([K.fx, K.fy, K.cx, K.cy, K.width, K.height], dtype=np.float32)
    shift = np.empty((h, w, 2), dtype=np.float32)
    mask = np.empty((h, w), dtype=np.float32)
    warped = np.empty((h, w, 3), dtype=np.float32)
    tdepth = np.empty((h, w), dtype=np.float32)

    def ptr(a):
        return a.ctypes.data_as(ctypes.POINTER(ctypes.c_float))

    code = lib.warp_forward(ptr(rgb), ptr(depth), ptr(pose), ptr(intr),
                            h, w, ptr(shift), ptr(mask), ptr(warped), ptr(tdepth))
    if code != 0:
        raise NativeKernelError(_ERROR_MESSAGES.get(code, f"error code {code}"))
    return WarpLabels(shift=shift, mask=mask, warped_rgb=warped, target_depth=tdepth)
