"""Direct extrinsic calibration by minimising the self-supervised losses.

Each outer step renders the current cloud into a depth map, lifts it back to
points, and estimates a residual pose ``xi`` from zero by running the stage
schedule (by default rotation, then translation, then a joint polish of
all six coordinates on the Chamfer term). The residual
transforms accumulate on the left: ``T_hat <- T_k @ T_hat``, and points map as
``p -> T_hat p``.

Gradients are central finite differences. The photometric term inside the
solver is the inverse-warp variant: transformed points sample the target
depth map with sparse bilinear interpolation, which is smooth in ``xi``
(the forward-scatter photometric loss is piecewise constant). The Chamfer
term inside the solver fades points out near the image border for the same
reason (see ``Problem.soft_chamfer``).

Outer steps are accepted only if they do not raise a monitor loss evaluated
on the cloud as first rendered, so the reported losses never increase.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .camera import Z_MIN, CameraIntrinsics, PointCloud, project_points
from .depthmap import SparseDepthMap, max_pool
from .lie import RigidTransform, Se3Params, compose, exp_so3, log_so3
from .losses import (
    EMD_EXACT_MAX,
    LossBreakdown,
    LossWeights,
    centroid_icp_distance,
    chamfer_distance,
    cluster_centroids,
    combined_loss,
    emd_distance,
    photometric_loss,
)
from .transformer import lift, scatter, scatter_indices, sparse_bilinear_sample_many

log = logging.getLogger(__name__)

TRANS = (0, 1, 2)
ROT = (3, 4, 5)
_ACTIVE = {"v": TRANS, "omega": ROT, "all": TRANS + ROT}


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class Stage:
    active: str  # "v", "omega" or "all"
    weights: LossWeights
    ramp_beta: bool = False  # beta_dist follows SolverConfig.beta_ramp across outer steps

    def __post_init__(self):
        if self.active not in _ACTIVE:
            raise ValueError(f"stage active set must be one of {sorted(_ACTIVE)}, got {self.active!r}")


DEFAULT_SCHEDULE = (
    Stage("omega", LossWeights(1.0, 0.15, "chamfer"), ramp_beta=True),
    Stage("v", LossWeights(0.0, 1.0, "emd")),
    # Joint refinement: the two blocks are coupled (a small rotation about the
    # camera center looks like a lateral shift at range), so polish all six.
    Stage("all", LossWeights(0.0, 1.0, "chamfer")),
)


@dataclass(frozen=True)
class SolverConfig:
    max_outer_iterations: int = 5
    max_inner_iterations: int = 100
    gradient_mode: str = "finite_difference"  # or "provided"
    fd_step_rot: float = 1e-4
    fd_step_trans: float = 1e-4
    convergence_tol_loss: float = 1e-7
    convergence_tol_step: float = 1e-7
    stage_schedule: tuple = DEFAULT_SCHEDULE
    seed: int = 0
    beta_ramp: tuple = (0.15, 1.75)
    # Outer loop stops once a residual step is below both of these.
    outer_tol_rot: float = 1e-5
    outer_tol_trans: float = 1e-4
    photometric_pool: int = 1  # max-pool window applied to the target before sampling
    cluster_count: int = 256  # centroids per cloud for EMD and centroid ICP
    morton_cell: float = 0.05  # voxel size (m) of the ordering used before chunking
    emd_cap: int = EMD_EXACT_MAX
    monitor_weights: LossWeights = LossWeights(0.0, 1.0, "chamfer")
    # Armijo line search
    armijo_c: float = 1e-4
    max_halvings: int = 20
    initial_step: float = 0.01  # largest first move of any coordinate (m or rad)
    # Width (px) of the ramp that fades points out at the image border in the
    # solver's Chamfer term, so that points crossing it do not make the loss jump.
    border_ramp: float = 4.0
    # Lever arm (m) used to put rotations on the same footing as translations
    # in the initial metric: a rotation of w rad moves a point at this range by ~w * lever.
    rotation_lever: float = 10.0

    def __post_init__(self):
        if self.max_outer_iterations < 1 or self.max_inner_iterations < 1:
            raise ValueError("iteration budgets must be >= 1")
        if not (self.fd_step_rot > 0 and self.fd_step_trans > 0):
            raise ValueError("finite-difference steps must be positive")
        if not (self.convergence_tol_loss > 0 and self.convergence_tol_step > 0):
            raise ValueError("tolerances must be positive")
        if self.gradient_mode not in ("finite_difference", "provided"):
            raise ValueError(f"unknown gradient mode {self.gradient_mode!r}")
        if not self.stage_schedule:
            raise ValueError("stage schedule is empty")

    def stage_weights(self, stage: Stage, outer: int) -> LossWeights:
        if not stage.ramp_beta:
            return stage.weights
        lo, hi = self.beta_ramp
        frac = outer / (self.max_outer_iterations - 1) if self.max_outer_iterations > 1 else 0.0
        return replace(stage.weights, beta_dist=lo + (hi - lo) * frac)


@dataclass(frozen=True, eq=False)
class OuterStep:
    transform: RigidTransform  # composed correction after this step
    step: RigidTransform  # residual estimated in this step
    loss: LossBreakdown  # monitor loss after applying the step
    inner_iterations: int
    gradient: np.ndarray  # objective gradient at the start of the step, (v, omega)
    curvature: np.ndarray  # per-coordinate second difference at the step's solution
    accepted: bool


@dataclass(frozen=True, eq=False)
class SolverReport:
    final_transform: RigidTransform
    initial_loss: LossBreakdown
    per_outer_step: list
    converged: bool
    wall_time: float  # informational only, never used in decisions

    @property
    def correction(self) -> RigidTransform:
        out = RigidTransform.identity()
        for s in self.per_outer_step:
            if s.accepted:
                out = compose(s.step, out)
        return out


def _transform(x: np.ndarray) -> RigidTransform:
    return RigidTransform(exp_so3(x[3:]), x[:3])


def _to_vector(T: RigidTransform) -> np.ndarray:
    return np.concatenate([T.translation, log_so3(T.rotation)])


def morton_order(points: np.ndarray, cell: float) -> np.ndarray:
    """Permutation sorting points along a 3D Z-order curve of ``cell``-sized voxels.

    Contiguous runs of the sorted cloud are spatially compact, which makes
    ``cluster_centroids`` chunks behave like local clusters.
    """
    pts = np.asarray(points, dtype=float)
    if len(pts) == 0:
        return np.zeros(0, dtype=np.int64)
    q = np.floor((pts - pts.min(axis=0)) / cell).astype(np.uint64)
    q = np.minimum(q, (1 << 21) - 1)
    code = np.zeros(len(pts), dtype=np.uint64)
    for bit in range(21):
        for axis in range(3):
            code |= ((q[:, axis] >> np.uint64(bit)) & np.uint64(1)) << np.uint64(3 * bit + axis)
    return np.lexsort((np.arange(len(pts)), code))


def _smoothstep(t):
    # C2 ramp from 0 at t <= 0 to 1 at t >= 1.
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


class Problem:
    """Loss of a candidate residual ``xi`` for one outer step.

    ``working`` are camera-frame points at the current estimate; ``xi`` moves
    them by ``to_transform(xi)`` before comparing with the target.
    """

    def __init__(
        self,
        working: np.ndarray,
        target_map: SparseDepthMap,
        K: CameraIntrinsics,
        cfg: SolverConfig,
        expected: Optional[np.ndarray] = None,
        corresponded: Optional[np.ndarray] = None,
    ):
        self.working = np.asarray(working, dtype=float)
        self.K = K
        self.cfg = cfg
        self.target_map = target_map
        self.target = lift(target_map, K).points
        self.target_tree = cKDTree(self.target)
        pooled = max_pool(target_map, cfg.photometric_pool, 1) if cfg.photometric_pool > 1 else target_map
        self.sample_values = pooled.values
        self._emd_chunks = None
        # Index-corresponded pair for centroid ICP (optional).
        self.expected = expected
        self.corresponded = corresponded
        self.evaluations = 0

    def photometric(self, T: RigidTransform) -> tuple[float, int]:
        pts = T.apply(self.working)
        uv, z, ok = project_points(pts, self.K)
        d = sparse_bilinear_sample_many(self.sample_values, uv[ok])
        has = d > 0
        n = int(np.count_nonzero(has))
        if n == 0:
            return 0.0, 0
        r = z[ok][has] - d[has]
        return 0.5 * float(np.mean(r * r)), n

    def begin_stage(self, x: np.ndarray) -> None:
        """Freeze the EMD chunk partition at the stage's starting pose.

        The points visible at ``x`` are Morton-ordered in that pose and chunked;
        their centroids then move rigidly with ``xi``, so the EMD term stays a
        continuous function of the pose within the stage.
        """
        T = _transform(np.asarray(x, dtype=float))
        pts = T.apply(self.working)
        vis = scatter_indices(PointCloud(pts), self.K)
        k = min(len(vis), len(self.target), self.cfg.cluster_count)
        if k == 0:
            raise SolverError("no point is visible at the stage's starting pose")
        src = self.working[vis][morton_order(pts[vis], self.cfg.morton_cell)]
        tgt = self.target[morton_order(self.target, self.cfg.morton_cell)]
        self._emd_chunks = (cluster_centroids(src, k), cluster_centroids(tgt, k))

    def visible(self, T: RigidTransform) -> np.ndarray:
        """Transformed points that survive the z-buffer, in row-major pixel order.

        At the true correction this is exactly the set the target was rendered
        from, in the target's lift order.
        """
        pts = T.apply(self.working)
        return pts[scatter_indices(PointCloud(pts), self.K)]

    def soft_chamfer(self, T: RigidTransform) -> float:
        """Chamfer distance with a continuous notion of "in view".

        Predicted -> target terms are weighted by a C2 ramp that goes from 1 at
        ``border_ramp`` pixels inside the image to 0 at its edge (and likewise
        in depth above ``Z_MIN``), so the weights add no kinks to the loss. Target -> predicted terms search all
        transformed points. At the true pose both directions vanish point for
        point, so the minimum is not shifted by the weighting.
        """
        pts = T.apply(self.working)
        z = pts[:, 2]
        front = z > Z_MIN
        if not front.any():
            return math.inf
        zs = np.where(front, z, 1.0)
        u = self.K.fx * pts[:, 0] / zs + self.K.cx
        v = self.K.fy * pts[:, 1] / zs + self.K.cy
        margin = np.minimum.reduce([u, self.K.width - u, v, self.K.height - v])
        ramp = self.cfg.border_ramp
        w = _smoothstep(margin / ramp) if ramp > 0 else (margin >= 0).astype(float)
        w = np.where(front, w * _smoothstep((z - Z_MIN) / Z_MIN), 0.0)
        if not np.any(w > 0):
            return math.inf
        d_pt, _ = self.target_tree.query(pts)
        d_tp, _ = cKDTree(pts).query(self.target)
        return float(np.sum(w * d_pt * d_pt) + np.sum(d_tp * d_tp))

    def distance(self, T: RigidTransform, kind: str) -> float:
        if kind == "chamfer":
            return self.soft_chamfer(T)
        if kind == "emd":
            if self._emd_chunks is None:
                self.begin_stage(np.zeros(6))
            centroids, target_centroids = self._emd_chunks
            return emd_distance(T.apply(centroids), target_centroids)
        if kind == "centroid_icp":
            if self.expected is None or self.corresponded is None:
                raise SolverError("centroid ICP needs an index-corresponded expected cloud")
            k = min(self.cfg.cluster_count, len(self.expected))
            return centroid_icp_distance(self.expected, self.corresponded, T, k)
        raise ValueError(f"unknown distance kind {kind!r}")

    def breakdown(self, x: np.ndarray, w: LossWeights) -> LossBreakdown:
        self.evaluations += 1
        T = _transform(x)
        photo, n = self.photometric(T) if w.alpha_ph > 0 else (0.0, 0)
        dist = self.distance(T, w.distance_kind) if w.beta_dist > 0 else 0.0
        return LossBreakdown(photo, dist, w.alpha_ph * photo + w.beta_dist * dist, n)

    def loss(self, x: np.ndarray, w: LossWeights) -> float:
        """Combined loss; ``inf`` when the candidate pushes every point out of view."""
        f = self.breakdown(x, w).combined
        if math.isnan(f):
            raise SolverError(f"NaN loss at xi={np.array2string(x, precision=6)}")
        return f


def loss_gradient(
    xi,
    problem: Problem,
    weights: LossWeights,
    cfg: SolverConfig,
    active: Sequence[int] = TRANS + ROT,
) -> np.ndarray:
    """Central finite differences over the ``active`` coordinates of ``(v, omega)``."""
    x = xi.as_vector() if isinstance(xi, Se3Params) else np.asarray(xi, dtype=float)
    g = np.zeros(6)
    for i in active:
        h = cfg.fd_step_trans if i < 3 else cfg.fd_step_rot
        e = np.zeros(6)
        e[i] = h
        g[i] = (problem.loss(x + e, weights) - problem.loss(x - e, weights)) / (2.0 * h)
    return g


def _curvature(problem: Problem, x: np.ndarray, w: LossWeights, h: float = 1e-3) -> np.ndarray:
    f0 = problem.loss(x, w)
    out = np.zeros(6)
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        out[i] = (problem.loss(x + e, w) - 2.0 * f0 + problem.loss(x - e, w)) / (h * h)
    return out


def solve_stage(
    initial,
    active: str,
    weights: LossWeights,
    cfg: SolverConfig,
    problem: Problem,
    gradient_fn: Optional[Callable] = None,
) -> tuple[Se3Params, int]:
    """Descent on the ``active`` coordinates with Armijo backtracking.

    Search directions are ``-H g`` with ``H`` a BFGS inverse-Hessian estimate
    built from successive gradients. ``H`` restarts as a scaled identity on the
    first iteration and whenever its direction fails the line search. Inactive coordinates stay
    frozen. Returns ``(xi, accepted_steps)``.
    """
    idx = list(_ACTIVE[active])
    x = initial.as_vector() if isinstance(initial, Se3Params) else np.asarray(initial, dtype=float).copy()
    problem.begin_stage(x)
    f = problem.loss(x, weights)
    if not math.isfinite(f):
        raise SolverError("loss is not finite at the stage's starting point")

    def grad(at):
        if cfg.gradient_mode == "provided":
            if gradient_fn is None:
                raise SolverError("gradient_mode='provided' needs a gradient function")
            return np.asarray(gradient_fn(at, problem, weights), dtype=float)[idx]
        return loss_gradient(at, problem, weights, cfg, idx)[idx]

    g = grad(x)
    n = len(idx)
    scale = np.array([1.0 if i < 3 else 1.0 / cfg.rotation_lever for i in idx])

    def fresh_metric(g):
        # Steepest descent in lever-scaled coordinates, largest first move initial_step.
        return np.diag(scale * scale) * (cfg.initial_step / float(np.max(np.abs(scale * g))))

    H = None
    fresh_at = -1
    accepted = 0
    reason = "iteration budget"
    for _ in range(cfg.max_inner_iterations):
        if not np.any(g):
            reason = "zero gradient"
            break
        x_new = f_new = None
        # Fall back to a fresh scaled-identity metric once if the quasi-Newton
        # direction does not yield sufficient decrease.
        for fresh in ((H is None), True):
            if fresh:
                H = fresh_metric(g)
                fresh_at = accepted
            d = -H @ g
            slope = float(g @ d)
            if slope >= 0.0:
                continue
            a = 1.0
            for _ in range(cfg.max_halvings + 1):
                cand = x.copy()
                cand[idx] += a * d
                fc = problem.loss(cand, weights)
                if fc <= f + cfg.armijo_c * a * slope:
                    x_new, f_new = cand, fc
                    break
                a *= 0.5
            if x_new is not None or fresh:
                break
        if x_new is None:
            reason = "line search failed"
            break
        accepted += 1
        step = x_new[idx] - x[idx]
        rel_drop = (f - f_new) / max(abs(f), 1e-300)
        x, f = x_new, f_new
        stalled = rel_drop < cfg.convergence_tol_loss or float(np.linalg.norm(step)) < cfg.convergence_tol_step
        g_new = grad(x)
        if stalled:
            # A tiny step from a learned metric can mean the metric has
            # collapsed along the valley; only a stall right after a restart counts.
            if fresh_at == accepted - 1:
                reason = f"converged (drop {rel_drop:.3g}, step {np.linalg.norm(step):.3g})"
                break
            H = None
            g = g_new
            continue
        y = g_new - g
        sy = float(step @ y)
        if sy > 1e-12 * float(np.linalg.norm(step) * np.linalg.norm(y)):
            if fresh_at == accepted - 1:
                H = H * (sy / float(y @ H @ y))
            rho = 1.0 / sy
            V = np.eye(n) - rho * np.outer(step, y)
            H = V @ H @ V.T + rho * np.outer(step, step)
        g = g_new
    log.debug("stage %s: %d steps, loss %.6g, %s", active, accepted, f, reason)
    return Se3Params.from_vector(x), accepted


def calibrate(
    source_cloud: PointCloud,
    target_map: SparseDepthMap,
    K: CameraIntrinsics,
    initial: Optional[RigidTransform] = None,
    cfg: Optional[SolverConfig] = None,
    expected_cloud: Optional[PointCloud] = None,
    gradient_fn: Optional[Callable] = None,
) -> SolverReport:
    """Estimate the LiDAR->camera transform aligning ``source_cloud`` with ``target_map``.

    ``initial`` is the starting extrinsic; the returned ``final_transform`` is
    ``correction @ initial``. The outer loop stops, converged, when a step is
    below the outer tolerances or fails to lower the monitor loss (the step is
    then recorded as rejected and not applied); running out of outer steps
    otherwise leaves ``converged`` false. ``expected_cloud`` (same length and order as
    ``source_cloud``, camera frame) enables the centroid-ICP distance.
    """
    cfg = cfg or SolverConfig()
    initial = initial or RigidTransform.identity()
    t0 = time.perf_counter()
    if len(source_cloud) == 0:
        raise SolverError("source cloud is empty")
    if target_map.valid_count() == 0:
        raise SolverError("target depth map has no valid pixels")
    if target_map.shape != K.shape:
        raise SolverError(f"target map is {target_map.width}x{target_map.height}, camera is {K.width}x{K.height}")

    current = initial.apply(source_cloud.points)
    expected = expected_cloud.points if expected_cloud is not None else None
    if expected is not None and len(expected) != len(current):
        raise SolverError("expected cloud must be index-corresponded with the source cloud")

    base = lift(scatter(PointCloud(current), K), K).points
    if len(base) == 0:
        raise SolverError("no source point projects into the image at the initial estimate")
    target_cloud = lift(target_map, K).points
    # Objective undefined: no shared pixels and no distance term to fall back on.
    _, first_overlap = photometric_loss(scatter(PointCloud(current), K), target_map)
    if first_overlap == 0 and all(
        cfg.stage_weights(s, 0).beta_dist == 0 for s in cfg.stage_schedule
    ):
        raise SolverError("no photometric overlap at the start and the point-distance weight is zero")

    monitor = Problem(base, target_map, K, cfg)
    T_hat = RigidTransform.identity()
    best = monitor.breakdown(np.zeros(6), cfg.monitor_weights)
    initial_loss = best
    steps = []
    converged = False
    for k in range(cfg.max_outer_iterations):
        working_map = scatter(PointCloud(T_hat.apply(current)), K)
        working = lift(working_map, K).points
        if len(working) == 0:
            log.warning("outer step %d: cloud left the image", k)
            break
        problem = Problem(
            working,
            target_map,
            K,
            cfg,
            expected=expected,
            corresponded=T_hat.apply(current) if expected is not None else None,
        )
        x = np.zeros(6)
        first_w = cfg.stage_weights(cfg.stage_schedule[0], k)
        g0 = loss_gradient(x, problem, first_w, cfg) if cfg.gradient_mode == "finite_difference" else np.zeros(6)
        inner = 0
        for stage in cfg.stage_schedule:
            w = cfg.stage_weights(stage, k)
            xi, used = solve_stage(x, stage.active, w, cfg, problem, gradient_fn)
            x = xi.as_vector()
            inner += used
        last_w = cfg.stage_weights(cfg.stage_schedule[-1], k)
        curv = _curvature(problem, x, last_w)
        step = _transform(x)
        candidate = compose(step, T_hat)
        loss = monitor.breakdown(_to_vector(candidate), cfg.monitor_weights)
        accepted = loss.combined <= best.combined
        small = float(np.linalg.norm(x[3:])) < cfg.outer_tol_rot and float(np.linalg.norm(x[:3])) < cfg.outer_tol_trans
        steps.append(OuterStep(candidate if accepted else T_hat, step, loss if accepted else best, inner, g0, curv, accepted))
        log.info(
            "outer %d: |w|=%.4g deg |v|=%.4g m loss %.6g -> %.6g %s",
            k, math.degrees(np.linalg.norm(x[3:])), np.linalg.norm(x[:3]), best.combined, loss.combined,
            "accepted" if accepted else "rejected",
        )
        if not accepted:
            # Re-alignment cannot lower the monitor loss any further: a fixed point.
            converged = True
            break
        T_hat, best = candidate, loss
        if small:
            converged = True
            break
    return SolverReport(
        final_transform=compose(T_hat, initial),
        initial_loss=initial_loss,
        per_outer_step=steps,
        converged=converged,
        wall_time=time.perf_counter() - t0,
    )
