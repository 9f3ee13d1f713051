"""Pinhole intrinsics, projection and back-projection.

Frames: camera x right, y down, z forward. Pixel coordinates are continuous;
pixel (row i, col j) covers ``[j, j+1) x [i, i+1)`` and its center is
``(j + 0.5, i + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

# Points closer than this along the optical axis are treated as out of view.
Z_MIN = 1e-3


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


# Half-resolution KITTI color camera (2011_09_26), used as the synthetic default.
KITTI_HALF = CameraIntrinsics(fx=360.769, fy=360.769, cx=304.780, cy=86.427, width=621, height=188)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """(N, 3) points in meters with optional per-point intensity in [0, 1]."""

    points: np.ndarray
    intensity: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.intensity is not None:
            inten = np.array(self.intensity, dtype=float).reshape(-1)
            if len(inten) != len(pts):
                raise ValueError(
                    f"intensity has {len(inten)} entries for {len(pts)} points"
                )
            inten.setflags(write=False)
            object.__setattr__(self, "intensity", inten)

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, T) -> "PointCloud":
        return PointCloud(T.apply(self.points), self.intensity)


def project_points(points, K: CameraIntrinsics):
    """Vectorised projection.

    Returns ``(uv, depth, in_view)`` where ``uv`` is (N, 2) continuous pixel
    coordinates (NaN where the point is behind ``Z_MIN``).
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    z = pts[:, 2]
    in_front = z > Z_MIN
    safe_z = np.where(in_front, z, 1.0)
    u = K.fx * pts[:, 0] / safe_z + K.cx
    v = K.fy * pts[:, 1] / safe_z + K.cy
    uv = np.stack([u, v], axis=1)
    uv[~in_front] = np.nan
    with np.errstate(invalid="ignore"):
        in_view = in_front & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    return uv, z, in_view


def project(p, K: CameraIntrinsics):
    """Project one camera-frame point; ``None`` when it is out of view."""
    uv, z, ok = project_points(np.asarray(p, dtype=float).reshape(1, 3), K)
    if not ok[0]:
        return None
    return uv[0], float(z[0])


def back_project_points(uv, depth, K: CameraIntrinsics) -> np.ndarray:
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    z = np.asarray(depth, dtype=float).reshape(-1)
    if np.any(z <= 0):
        raise ValueError("back-projection needs positive depth")
    x = (uv[:, 0] - K.cx) * z / K.fx
    y = (uv[:, 1] - K.cy) * z / K.fy
    return np.stack([x, y, z], axis=1)


def back_project(pixel, depth: float, K: CameraIntrinsics) -> np.ndarray:
    """Inverse of ``project`` for a single pixel: ``((u-cx) Z/fx, (v-cy) Z/fy, Z)``."""
    if not depth > 0:
        raise ValueError(f"back-projection needs positive depth, got {depth}")
    return back_project_points(np.asarray(pixel, dtype=float).reshape(1, 2), [depth], K)[0]


def scale_intrinsics(K: CameraIntrinsics, sx: float, sy: float) -> CameraIntrinsics:
    if not (sx > 0 and sy > 0):
        raise ValueError(f"scale factors must be positive, got ({sx}, {sy})")
    return CameraIntrinsics(
        fx=K.fx * sx,
        fy=K.fy * sy,
        cx=K.cx * sx,
        cy=K.cy * sy,
        width=max(1, int(round(K.width * sx))),
        height=max(1, int(round(K.height * sy))),
    )
