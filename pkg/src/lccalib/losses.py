"""Depth-map and point-cloud losses and their weighted combination.

Units: photometric and Chamfer/centroid-ICP terms are in m^2, EMD in m.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .camera import PointCloud
from .depthmap import SparseDepthMap
from .lie import RigidTransform

log = logging.getLogger(__name__)

DISTANCE_KINDS = ("chamfer", "emd", "centroid_icp")

# Exact assignment up to this many points; above it the auction solver is used.
EMD_EXACT_MAX = 512
# Relative duality gap accepted from the auction solver.
EMD_MAX_GAP = 0.01


@dataclass(frozen=True)
class LossWeights:
    alpha_ph: float = 1.0
    beta_dist: float = 0.15
    distance_kind: str = "chamfer"

    def __post_init__(self):
        if self.alpha_ph < 0 or self.beta_dist < 0:
            raise ValueError("loss weights must be non-negative")
        if self.alpha_ph == 0 and self.beta_dist == 0:
            raise ValueError("at least one loss weight must be positive")
        if self.distance_kind not in DISTANCE_KINDS:
            raise ValueError(f"unknown distance kind {self.distance_kind!r}; expected one of {DISTANCE_KINDS}")


@dataclass(frozen=True)
class LossBreakdown:
    photometric: float
    distance: float
    combined: float
    valid_pixel_overlap: int


@dataclass(frozen=True, eq=False)
class EmdResult:
    cost: float
    assignment: np.ndarray  # assignment[i] = index in s2 matched to s1[i]
    exact: bool
    duality_gap: float  # relative; 0 for the exact solver


def _as_points(c) -> np.ndarray:
    if isinstance(c, PointCloud):
        return c.points
    return np.asarray(c, dtype=float).reshape(-1, 3)


def photometric_loss(pred: SparseDepthMap, target: SparseDepthMap) -> tuple[float, int]:
    """Half the mean squared depth difference over pixels valid in both maps.

    Returns ``(loss, overlap)``; no shared pixel gives ``(0.0, 0)``, which
    callers must read as "no information", not as a perfect match.
    """
    if pred.shape != target.shape:
        raise ValueError(f"depth maps differ in size: {pred.shape} vs {target.shape}")
    both = pred.valid & target.valid
    n = int(np.count_nonzero(both))
    if n == 0:
        return 0.0, 0
    diff = target.values[both] - pred.values[both]
    return 0.5 * float(np.mean(diff * diff)), n


def chamfer_distance(s1, s2, tree1: Optional[cKDTree] = None, tree2: Optional[cKDTree] = None) -> float:
    """Sum of squared nearest-neighbour distances, both directions.

    Pre-built KD-trees can be passed to skip construction in hot loops.
    """
    a = _as_points(s1)
    b = _as_points(s2)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two non-empty clouds")
    tree1 = tree1 if tree1 is not None else cKDTree(a)
    tree2 = tree2 if tree2 is not None else cKDTree(b)
    d_ab, _ = tree2.query(a)
    d_ba, _ = tree1.query(b)
    return float(np.sum(d_ab * d_ab) + np.sum(d_ba * d_ba))


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _auction(cost: np.ndarray, max_gap: float):
    """Jacobi auction with epsilon scaling for min-cost assignment.

    Returns ``(assignment, primal, lower_bound)``; the loop stops once the
    relative duality gap is at most ``max_gap``.
    """
    n = cost.shape[0]
    benefit = -cost
    prices = np.zeros(n)
    eps = max(float(cost.max() - cost.min()), 1e-12) / 4.0
    rows = np.arange(n)
    while True:
        person_to_obj = np.full(n, -1)
        obj_to_person = np.full(n, -1)
        while True:
            free = np.flatnonzero(person_to_obj < 0)
            if len(free) == 0:
                break
            vals = benefit[free] - prices
            top2 = np.argpartition(-vals, 1, axis=1)[:, :2]
            v_a = vals[np.arange(len(free)), top2[:, 0]]
            v_b = vals[np.arange(len(free)), top2[:, 1]]
            best = np.where(v_a >= v_b, top2[:, 0], top2[:, 1])
            v1 = np.maximum(v_a, v_b)
            v2 = np.minimum(v_a, v_b)
            bids = prices[best] + (v1 - v2) + eps
            # Highest bid per object wins; ties go to the lower person index.
            order = np.lexsort((free, -bids, best))
            first = np.ones(len(order), dtype=bool)
            first[1:] = best[order][1:] != best[order][:-1]
            win = order[first]
            objs = best[win]
            winners = free[win]
            prev = obj_to_person[objs]
            person_to_obj[prev[prev >= 0]] = -1
            obj_to_person[objs] = winners
            person_to_obj[winners] = objs
            prices[objs] = bids[win]
        primal = float(cost[rows, person_to_obj].sum())
        profits = (benefit - prices).max(axis=1)
        lower = -float(profits.sum() + prices.sum())
        if primal - lower <= max_gap * max(primal, 1e-12) or eps < 1e-12:
            return person_to_obj, primal, lower
        eps /= 5.0


def emd_solve(s1, s2, exact_max: int = EMD_EXACT_MAX, max_gap: float = EMD_MAX_GAP) -> EmdResult:
    """Minimum total Euclidean displacement over bijections ``s1 -> s2``."""
    a = _as_points(s1)
    b = _as_points(s2)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("EMD needs two non-empty clouds")
    if len(a) != len(b):
        raise ValueError(f"EMD needs equal-size clouds, got {len(a)} and {len(b)}")
    cost = _pairwise(a, b)
    if len(a) <= exact_max:
        r, c = linear_sum_assignment(cost)
        assign = np.empty(len(a), dtype=np.int64)
        assign[r] = c
        return EmdResult(float(cost[r, c].sum()), assign, True, 0.0)
    assign, primal, lower = _auction(cost, max_gap)
    gap = (primal - lower) / primal if primal > 0 else 0.0
    log.debug("auction EMD n=%d cost=%.6g gap=%.3g", len(a), primal, gap)
    return EmdResult(primal, assign, False, gap)


def emd_distance(s1, s2) -> float:
    return emd_solve(s1, s2).cost


def cluster_centroids(c, k: int) -> np.ndarray:
    """Means of ``k`` contiguous, near-equal chunks of the cloud in its stored order.

    Clouds produced by ``lift`` are in row-major pixel order, so the chunks
    are bands of neighbouring pixels.
    """
    pts = _as_points(c)
    if k < 1:
        raise ValueError(f"cluster count must be positive, got {k}")
    if len(pts) < k:
        raise ValueError(f"cannot form {k} clusters from {len(pts)} points")
    # Larger chunks first; sizes differ by at most one.
    sizes = np.full(k, len(pts) // k)
    sizes[: len(pts) % k] += 1
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    sums = np.add.reduceat(pts, starts, axis=0)
    return sums / sizes[:, None]


def centroid_icp_distance(expected, miscalib, T: RigidTransform, cluster_count: int) -> float:
    """Half the summed squared residual between corresponded cluster centers.

    Both clouds are chunked identically, so they must have the same length
    and the same point order.
    """
    a = _as_points(expected)
    b = _as_points(miscalib)
    if len(a) != len(b):
        raise ValueError(
            f"centroid ICP needs index-corresponded clouds, got {len(a)} and {len(b)} points"
        )
    ca = cluster_centroids(a, cluster_count)
    cb = cluster_centroids(b, cluster_count)
    r = ca - T.apply(cb)
    return 0.5 * float(np.sum(r * r))


def emd_on_centroids(s1, s2, cap: int = EMD_EXACT_MAX) -> float:
    """EMD after reducing both clouds to ``min(|s1|, |s2|, cap)`` chunk centroids."""
    a = _as_points(s1)
    b = _as_points(s2)
    k = min(len(a), len(b), cap)
    if len(a) != k:
        a = cluster_centroids(a, k)
    if len(b) != k:
        b = cluster_centroids(b, k)
    return emd_distance(a, b)


def cloud_distance(pred, target, kind: str, cluster_count: int = 4096, emd_cap: int = EMD_EXACT_MAX) -> float:
    if kind == "chamfer":
        return chamfer_distance(pred, target)
    if kind == "emd":
        return emd_on_centroids(pred, target, emd_cap)
    if kind == "centroid_icp":
        n = len(_as_points(pred))
        return centroid_icp_distance(target, pred, RigidTransform.identity(), min(cluster_count, n))
    raise ValueError(f"unknown distance kind {kind!r}")


def combined_loss(
    pred_map: SparseDepthMap,
    target_map: SparseDepthMap,
    pred_cloud,
    target_cloud,
    w: LossWeights,
    cluster_count: int = 4096,
    emd_cap: int = EMD_EXACT_MAX,
) -> LossBreakdown:
    """``alpha_ph * photometric + beta_dist * distance``.

    ``pred_cloud`` is already transformed. For ``centroid_icp`` the two clouds
    must be index-corresponded; for ``emd`` they are reduced to centroids when
    their sizes differ or exceed ``emd_cap``. A zero weight skips its term.
    """
    photo, overlap = photometric_loss(pred_map, target_map)
    dist = 0.0
    if w.beta_dist > 0:
        dist = cloud_distance(pred_cloud, target_cloud, w.distance_kind, cluster_count, emd_cap)
    return LossBreakdown(photo, dist, w.alpha_ph * photo + w.beta_dist * dist, overlap)
