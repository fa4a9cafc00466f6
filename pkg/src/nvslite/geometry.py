"""Pinhole camera math and narrow-baseline relative-pose sampling.

Conventions: pixel coordinates are (x, y) with x along image width, depth is
the camera-frame z coordinate, and a relative pose maps source-camera points
to target-camera points as ``R @ p + t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ROTATION_TOL = 1e-6


class BehindCameraError(ValueError):
    """Raised when projecting a point with non-positive z; callers drop the pixel."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")

    @classmethod
    def default(cls, width: int, height: int) -> "Intrinsics":
        """Center principal point, fx = fy = max(W, H).

        Makes the narrow-baseline pose ranges invariant to image size.
        """
        f = float(max(width, height))
        return cls(fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                   width=width, height=height)


@dataclass(frozen=True)
class Extrinsics:
    """Relative rigid transform between source and target cameras.

    ``R`` is 3x3 row-major, ``t`` is a 3-vector in depth units. The flattened
    row-major [R|t] (12 floats) is the pose-encoder input and the sidecar
    file format.
    """

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=ROTATION_TOL):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ROTATION_TOL:
            raise ValueError(f"rotation determinant {np.linalg.det(R)} != 1")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Extrinsics":
        return cls(R=np.eye(3), t=np.zeros(3))

    def flattened(self) -> np.ndarray:
        """Row-major [R|t] as 12 floats."""
        return np.concatenate([self.R, self.t[:, None]], axis=1).reshape(-1)

    @classmethod
    def from_flat(cls, values) -> "Extrinsics":
        m = np.asarray(values, dtype=np.float64).reshape(3, 4)
        return cls(R=m[:, :3], t=m[:, 3])


@dataclass(frozen=True)
class PoseSamplerConfig:
    max_translation: float = 0.05  # fraction of median scene depth
    max_rotation_deg: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.max_translation < 0 or self.max_rotation_deg < 0:
            raise ValueError("pose sampler maxima must be >= 0")


def unproject(pixel, depth: float, K: Intrinsics) -> np.ndarray:
    """Lift a pixel at the given depth into camera space."""
    if depth <= 0:
        raise ValueError(f"depth must be positive, got {depth}")
    x, y = float(pixel[0]), float(pixel[1])
    return np.array([(x - K.cx) * depth / K.fx,
                     (y - K.cy) * depth / K.fy,
                     depth], dtype=np.float64)


def project(point, K: Intrinsics):
    """Project a camera-space point; returns ((u, v), depth)."""
    p = np.asarray(point, dtype=np.float64)
    if p[2] <= 0:
        raise BehindCameraError(f"point behind camera, z={p[2]}")
    u = K.fx * p[0] / p[2] + K.cx
    v = K.fy * p[1] / p[2] + K.cy
    return np.array([u, v], dtype=np.float64), float(p[2])


def transform_point(point, T: Extrinsics) -> np.ndarray:
    return T.R @ np.asarray(point, dtype=np.float64) + T.t


def _euler_zyx(rx: float, ry: float, rz: float) -> np.ndarray:
    """Rotation Rz(rz) @ Ry(ry) @ Rx(rx), angles in radians."""
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def euler_zyx_angles(R: np.ndarray):
    """Inverse of :func:`_euler_zyx`; returns (rx, ry, rz) in radians."""
    ry = math.asin(max(-1.0, min(1.0, -R[2, 0])))
    rx = math.atan2(R[2, 1], R[2, 2])
    rz = math.atan2(R[1, 0], R[0, 0])
    return rx, ry, rz


def sample_pose(cfg: PoseSamplerConfig, median_depth: float,
                rng: np.random.Generator | None = None) -> Extrinsics:
    """Draw a small random relative pose.

    Translation is uniform in the cube scaled by ``max_translation *
    median_depth`` with the z range halved (large zooms open huge holes);
    rotation is composed from uniform Euler angles in
    ``[-max_rotation_deg, +max_rotation_deg]``. Deterministic given
    ``cfg.seed`` when no generator is passed; callers that need a stream of
    poses own their generator.
    """
    if median_depth <= 0:
        raise ValueError(f"median_depth must be positive, got {median_depth}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    t_max = cfg.max_translation * median_depth
    t = rng.uniform(-t_max, t_max, size=3)
    t[2] *= 0.5
    a_max = math.radians(cfg.max_rotation_deg)
    rx, ry, rz = rng.uniform(-a_max, a_max, size=3)
    return Extrinsics(R=_euler_zyx(rx, ry, rz), t=t)
