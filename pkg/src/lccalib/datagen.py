"""Synthetic decalibration data.

A sample is built the same way as a training pair: decalibrate a correctly
calibrated cloud with ``T_random``, render the mis-calibrated depth map, then
re-render that map through ``T_random^-1`` to get the target. The correction
to recover is ``T_random^-1``.

Random streams come from numpy's PCG64 seeded by ``SeedSequence([seed, index])``
so every sample index has its own reproducible stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .camera import CameraIntrinsics, PointCloud
from .depthmap import SparseDepthMap
from .lie import RigidTransform, Se3Params, inverse, to_transform
from .transformer import resample_depth_map, scatter, transform_cloud

SCENE_KINDS = ("ground_plane_boxes", "corridor", "random_clutter")

# Camera height above the ground plane (y points down), meters.
GROUND_Y = 1.65


@dataclass(frozen=True)
class DecalibrationSpec:
    rot_range: float = math.radians(10.0)  # radians, half-width per axis
    trans_range: float = 0.2  # meters, half-width per axis
    seed: int = 0
    count: int = 1

    def __post_init__(self):
        if self.rot_range < 0 or self.trans_range < 0:
            raise ValueError("decalibration ranges must be non-negative")
        if self.count < 1:
            raise ValueError("count must be >= 1")


@dataclass(frozen=True, eq=False)
class CalibrationSample:
    sample_id: int
    xi: Se3Params  # the decalibration that was applied
    source_cloud: PointCloud  # correctly calibrated, camera frame
    miscalib_cloud: PointCloud
    miscalib_map: SparseDepthMap
    target_map: SparseDepthMap
    ground_truth: RigidTransform  # correction, T_random^-1
    K: CameraIntrinsics


def rng_for(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(index)])))


def sample_decalibration(spec: DecalibrationSpec, index: int) -> Se3Params:
    """Six independent uniform draws: ``(vx, vy, vz)`` then ``(wx, wy, wz)``."""
    u = rng_for(spec.seed, index).uniform(-1.0, 1.0, size=6)
    return Se3Params(u[:3] * spec.trans_range, u[3:] * spec.rot_range)


def make_sample(cloud: PointCloud, K: CameraIntrinsics, xi: Se3Params, sample_id: int = 0) -> CalibrationSample:
    T_random = to_transform(xi)
    miscalib_cloud = transform_cloud(cloud, T_random)
    miscalib_map = scatter(miscalib_cloud, K)
    if miscalib_map.valid_count() == 0:
        raise ValueError("no point of the cloud projects into the image after decalibration")
    correction = inverse(T_random)
    target_map = resample_depth_map(miscalib_map, correction, K)
    if target_map.valid_count() == 0:
        raise ValueError("no point of the re-calibrated map projects into the image")
    return CalibrationSample(
        sample_id=sample_id,
        xi=xi,
        source_cloud=cloud,
        miscalib_cloud=miscalib_cloud,
        miscalib_map=miscalib_map,
        target_map=target_map,
        ground_truth=correction,
        K=K,
    )


def _box_surface(rng, n, lo, hi):
    """``n`` points on the faces of an axis-aligned box, bottom face excluded."""
    size = hi - lo
    dx, dy, dz = size
    # faces: -x, +x, -y (top, since y is down), -z, +z
    areas = np.array([dy * dz, dy * dz, dx * dz, dx * dy, dx * dy])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(size=(n, 3))
    pts = lo + u * size
    pts[face == 0, 0] = lo[0]
    pts[face == 1, 0] = hi[0]
    pts[face == 2, 1] = lo[1]
    pts[face == 3, 2] = lo[2]
    pts[face == 4, 2] = hi[2]
    return pts


def _ground_plane_boxes(rng, n):
    n_ground = int(round(0.4 * n))
    n_boxes = n - n_ground
    z = rng.uniform(3.0, 40.0, n_ground)
    x = rng.uniform(-1.0, 1.0, n_ground) * (0.9 * z + 2.0)
    ground = np.stack([x, np.full(n_ground, GROUND_Y), z], axis=1)

    n_box = 12
    centers_z = np.sort(rng.uniform(4.0, 35.0, n_box))
    centers_x = rng.uniform(-0.7, 0.7, n_box) * centers_z
    dims = np.stack(
        [rng.uniform(0.8, 3.0, n_box), rng.uniform(1.0, 4.0, n_box), rng.uniform(0.8, 3.0, n_box)], axis=1
    )
    lo = np.stack([centers_x - dims[:, 0] / 2, GROUND_Y - dims[:, 1], centers_z - dims[:, 2] / 2], axis=1)
    hi = lo + dims
    hi[:, 1] = GROUND_Y
    # Farther boxes look smaller; give them points in proportion to their depth.
    share = centers_z / centers_z.sum()
    counts = np.floor(share * n_boxes).astype(int)
    counts[: n_boxes - counts.sum()] += 1
    boxes = [_box_surface(rng, c, lo[i], hi[i]) for i, c in enumerate(counts)]
    return np.concatenate([ground] + boxes, axis=0)


def _corridor(rng, n):
    half_width, ceiling = 2.5, -1.5
    z = rng.uniform(2.0, 40.0, n)
    surface = rng.integers(0, 4, n)
    along = rng.uniform(0.0, 1.0, n)
    x = np.where(surface == 0, -half_width, half_width)
    y = ceiling + along * (GROUND_Y - ceiling)
    floor_or_ceiling = surface >= 2
    x = np.where(floor_or_ceiling, -half_width + along * 2 * half_width, x)
    y = np.where(surface == 2, GROUND_Y, np.where(surface == 3, ceiling, y))
    return np.stack([x, y, z], axis=1)


def _random_clutter(rng, n):
    z = rng.uniform(3.0, 40.0, n)
    x = rng.uniform(-0.8, 0.8, n) * z
    y = rng.uniform(-2.0, GROUND_Y, n)
    return np.stack([x, y, z], axis=1)


def synth_scene(kind: str = "ground_plane_boxes", density: int = 5000, seed: int = 0) -> PointCloud:
    """Deterministic camera-frame scene (x right, y down, z forward) of exactly ``density`` points."""
    if density < 100:
        raise ValueError(f"density must be >= 100, got {density}")
    builders = {
        "ground_plane_boxes": _ground_plane_boxes,
        "corridor": _corridor,
        "random_clutter": _random_clutter,
    }
    if kind not in builders:
        raise ValueError(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0x5CE7E])))
    pts = builders[kind](rng, density)
    assert len(pts) == density
    return PointCloud(pts)


def generate_samples(
    cloud: PointCloud,
    K: CameraIntrinsics,
    spec: DecalibrationSpec,
    start: int = 0,
    count: Optional[int] = None,
) -> list[CalibrationSample]:
    count = spec.count if count is None else count
    return [make_sample(cloud, K, sample_decalibration(spec, i), i) for i in range(start, start + count)]
