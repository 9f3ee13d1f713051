"""3D spatial transformer over sparse depth maps.

lift (pixels -> points) -> rigid transform -> project -> scatter (points -> pixels).
Scatter is a z-buffer: when several points land in one pixel the nearest
depth wins, so the result does not depend on point order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraIntrinsics, PointCloud, back_project_points, project_points
from .depthmap import NO_DATA, SparseDepthMap
from .lie import RigidTransform


@dataclass(frozen=True)
class ScatterRecord:
    source_index: int  # index of the point in the input cloud
    row: int
    col: int
    depth: float
    collision: bool  # another point competed for the same pixel


def cantor_pair(a, b):
    """Cantor pairing of non-negative integers; unique key per (a, b)."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    s = a + b
    return s * (s + 1) // 2 + b


def _check_dims(m: SparseDepthMap, K: CameraIntrinsics) -> None:
    if m.shape != K.shape:
        raise ValueError(f"depth map is {m.shape[1]}x{m.shape[0]} but camera is {K.width}x{K.height}")


def lift(m: SparseDepthMap, K: CameraIntrinsics) -> PointCloud:
    """One point per valid pixel, back-projected from the pixel center, row-major."""
    _check_dims(m, K)
    rows, cols = np.nonzero(m.values != NO_DATA)
    if len(rows) == 0:
        return PointCloud(np.zeros((0, 3)))
    uv = np.stack([cols + 0.5, rows + 0.5], axis=1)
    return PointCloud(back_project_points(uv, m.values[rows, cols], K))


def transform_cloud(c: PointCloud, T: RigidTransform) -> PointCloud:
    return PointCloud(T.apply(c.points), c.intensity)


def _zbuffer(points: np.ndarray, K: CameraIntrinsics):
    """Winning point per pixel.

    Returns ``(winners, rows, cols, depth, collided)`` restricted to the
    winning points, sorted by pixel key.
    """
    uv, z, ok = project_points(points, K)
    idx = np.flatnonzero(ok)
    cols = np.floor(uv[idx, 0]).astype(np.int64)
    rows = np.floor(uv[idx, 1]).astype(np.int64)
    key = cantor_pair(rows, cols)
    depth = z[idx]
    # Sort by (key, depth, index): first entry of each key is the nearest point,
    # ties broken by input index so the choice of winner is reproducible.
    order = np.lexsort((idx, depth, key))
    key_sorted = key[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = key_sorted[1:] != key_sorted[:-1]
    counts = np.diff(np.append(np.flatnonzero(first), len(order)))
    win = order[first]
    return idx[win], rows[win], cols[win], depth[win], counts > 1


def scatter(c: PointCloud, K: CameraIntrinsics) -> SparseDepthMap:
    """Rasterise a camera-frame cloud with the nearest-depth rule."""
    out = np.zeros(K.shape)
    if len(c):
        _, rows, cols, depth, _ = _zbuffer(c.points, K)
        out[rows, cols] = depth
    return SparseDepthMap(out)


def scatter_indices(c: PointCloud, K: CameraIntrinsics) -> np.ndarray:
    """Indices of the points that survive the z-buffer, in row-major pixel order."""
    if not len(c):
        return np.zeros(0, dtype=np.int64)
    winners, rows, cols, _, _ = _zbuffer(c.points, K)
    return winners[np.lexsort((cols, rows))]


def scatter_records(c: PointCloud, K: CameraIntrinsics) -> list[ScatterRecord]:
    if not len(c):
        return []
    winners, rows, cols, depth, collided = _zbuffer(c.points, K)
    order = np.lexsort((cols, rows))
    return [
        ScatterRecord(int(winners[k]), int(rows[k]), int(cols[k]), float(depth[k]), bool(collided[k]))
        for k in order
    ]


def resample_depth_map(m: SparseDepthMap, T: RigidTransform, K: CameraIntrinsics) -> SparseDepthMap:
    """Re-render ``m`` as seen after moving its points by ``T``."""
    return scatter(transform_cloud(lift(m, K), T), K)


def sparse_bilinear_sample_many(values: np.ndarray, uv) -> np.ndarray:
    """Bilinear sampling that only trusts valid neighbours.

    ``uv`` holds continuous pixel coordinates (pixel centers at +0.5). The
    weights of the valid neighbours among the four surrounding pixel centers
    are renormalised to sum to one. Returns ``NO_DATA`` where no valid
    neighbour carries weight.
    """
    values = np.asarray(values, dtype=float)
    h, w = values.shape
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    gx = uv[:, 0] - 0.5
    gy = uv[:, 1] - 0.5
    j0 = np.floor(gx).astype(np.int64)
    i0 = np.floor(gy).astype(np.int64)
    ax = gx - j0
    ay = gy - i0

    num = np.zeros(len(uv))
    den = np.zeros(len(uv))
    for di, dj, wt in (
        (0, 0, (1 - ax) * (1 - ay)),
        (0, 1, ax * (1 - ay)),
        (1, 0, (1 - ax) * ay),
        (1, 1, ax * ay),
    ):
        ii = i0 + di
        jj = j0 + dj
        inside = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
        d = np.zeros(len(uv))
        d[inside] = values[ii[inside], jj[inside]]
        ok = inside & (d != NO_DATA)
        num += np.where(ok, wt * d, 0.0)
        den += np.where(ok, wt, 0.0)
    out = np.full(len(uv), NO_DATA)
    has = den > 1e-12
    out[has] = num[has] / den[has]
    return out


def sparse_bilinear_sample(m: SparseDepthMap, at) -> float:
    u, v = float(at[0]), float(at[1])
    if not (0 <= u < m.width and 0 <= v < m.height):
        raise ValueError(f"sample location ({u}, {v}) outside {m.width}x{m.height} grid")
    return float(sparse_bilinear_sample_many(m.values, [[u, v]])[0])
