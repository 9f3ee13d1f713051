import math
from dataclasses import replace

import numpy as np
import pytest

from lccalib.camera import KITTI_HALF, CameraIntrinsics, PointCloud
from lccalib.datagen import make_sample, synth_scene
from lccalib.depthmap import SparseDepthMap
from lccalib.lie import RigidTransform, Se3Params, exp_so3, inverse, to_transform
from lccalib.losses import LossWeights
from lccalib.metrics import geodesic_distance
from lccalib.solver import (
    DEFAULT_SCHEDULE,
    Problem,
    SolverConfig,
    SolverError,
    Stage,
    calibrate,
    loss_gradient,
    morton_order,
    solve_stage,
)
from lccalib.transformer import lift, scatter

K = KITTI_HALF
CHAMFER = LossWeights(0.0, 1.0, "chamfer")


@pytest.fixture(scope="module")
def scene():
    return synth_scene("ground_plane_boxes", 5000, 0)


@pytest.fixture(scope="module")
def aligned(scene):
    target_map = scatter(scene, K)
    return Problem(lift(target_map, K).points, target_map, K, SolverConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(max_outer_iterations=0)
    with pytest.raises(ValueError):
        SolverConfig(fd_step_rot=0.0)
    with pytest.raises(ValueError):
        SolverConfig(convergence_tol_loss=0.0)
    with pytest.raises(ValueError):
        SolverConfig(gradient_mode="adjoint")
    with pytest.raises(ValueError):
        SolverConfig(stage_schedule=())
    with pytest.raises(ValueError):
        Stage("x", CHAMFER)


def test_beta_ramp():
    cfg = SolverConfig()
    first = DEFAULT_SCHEDULE[0]
    assert cfg.stage_weights(first, 0).beta_dist == 0.15
    assert cfg.stage_weights(first, cfg.max_outer_iterations - 1).beta_dist == pytest.approx(1.75)
    assert cfg.stage_weights(DEFAULT_SCHEDULE[1], 3) == DEFAULT_SCHEDULE[1].weights


def test_gradient_vanishes_at_optimum(rng):
    # Sparse target so nearest neighbours stay fixed under the probe steps.
    target = np.zeros(K.shape)
    rows = rng.choice(np.arange(20, K.height - 20, 6), 40)
    cols = rng.choice(np.arange(20, K.width - 20, 6), 40)
    target[rows, cols] = rng.uniform(5.0, 15.0, 40)
    tmap = SparseDepthMap(target)
    p = Problem(lift(tmap, K).points, tmap, K, SolverConfig())
    g = loss_gradient(np.zeros(6), p, CHAMFER, p.cfg)
    assert np.linalg.norm(g) < 1e-6


def test_one_point_chamfer_gradient():
    # Pixel centers on (0, 0, 5) and (1, 0, 5), far from the border ramp.
    Kp = CameraIntrinsics(50.0, 50.0, 10.5, 5.5, 31, 11)
    target = np.zeros((11, 31))
    target[5, 20] = 5.0
    p = Problem(np.array([[0.0, 0.0, 5.0]]), SparseDepthMap(target), Kp, SolverConfig())
    assert np.allclose(p.target, [[1.0, 0.0, 5.0]])
    g = loss_gradient(np.zeros(6), p, CHAMFER, p.cfg, active=(0, 1, 2))
    assert np.abs(g[:3] - [-4.0, 0.0, 0.0]).max() < 1e-6


def test_centroid_icp_gradient_self_consistent(scene, rng):
    pts = scene.points[:2048]
    T = RigidTransform(exp_so3([0.02, -0.03, 0.01]), [0.05, 0.02, -0.1])
    p = Problem(pts, scatter(scene, K), K, SolverConfig(), expected=T.apply(pts), corresponded=pts)
    w = LossWeights(0.0, 1.0, "centroid_icp")
    for _ in range(5):
        x = rng.uniform(-1, 1, 6) * [0.2, 0.2, 0.2, 0.17, 0.17, 0.17]
        g4 = loss_gradient(x, p, w, SolverConfig(fd_step_rot=1e-4, fd_step_trans=1e-4))
        g5 = loss_gradient(x, p, w, SolverConfig(fd_step_rot=1e-5, fd_step_trans=1e-5))
        assert np.linalg.norm(g4 - g5) < 1e-4 * np.linalg.norm(g5)


def test_stage_at_optimum_takes_no_step(aligned):
    xi, steps = solve_stage(np.zeros(6), "all", CHAMFER, aligned.cfg, aligned)
    assert steps == 0 and np.array_equal(xi.as_vector(), np.zeros(6))


def test_stage_recovers_z_offset(scene):
    target_map = scatter(scene, K)
    offset = RigidTransform(np.eye(3), [0, 0, 0.1])
    working = lift(scatter(PointCloud(offset.apply(scene.points)), K), K).points
    cfg = SolverConfig(max_inner_iterations=100)
    p = Problem(working, target_map, K, cfg)
    xi, steps = solve_stage(np.zeros(6), "v", CHAMFER, cfg, p)
    assert steps <= 100
    assert abs(xi.v[2] + 0.1) < 1e-3
    assert np.array_equal(xi.omega, np.zeros(3))


def test_stage_recovers_yaw(scene):
    # 5 degree error about the camera's vertical axis, rotation-only stage.
    err = to_transform(Se3Params([0, 0, 0], [0, math.radians(5.0), 0]))
    sample = make_sample(scene, K, Se3Params([0, 0, 0], [0, math.radians(5.0), 0]))
    cfg = SolverConfig(max_inner_iterations=100)
    p = Problem(lift(sample.miscalib_map, K).points, sample.target_map, K, cfg)
    xi, _ = solve_stage(np.zeros(6), "omega", LossWeights(1.0, 0.15, "chamfer"), cfg, p)
    assert math.degrees(geodesic_distance(to_transform(xi).rotation, err.rotation.T)) < 0.2


def test_stage_keeps_inactive_coordinates(aligned):
    start = np.array([0.01, -0.02, 0.03, 0.0, 0.0, 0.0])
    xi, _ = solve_stage(start, "omega", CHAMFER, aligned.cfg, aligned)
    assert np.array_equal(xi.v, start[:3])


def test_morton_order_is_a_permutation(rng):
    pts = rng.uniform(-10, 10, (500, 3))
    order = morton_order(pts, 0.05)
    assert sorted(order) == list(range(500))
    assert len(morton_order(np.zeros((0, 3)), 0.05)) == 0


@pytest.fixture(scope="module")
def recovered(scene):
    xi = Se3Params([0.05, -0.1, 0.15], np.radians([3.0, -5.0, 7.0]))
    sample = make_sample(scene, K, xi)
    return sample, calibrate(sample.miscalib_cloud, sample.target_map, K)


def test_calibrate_recovers_known_decalibration(recovered):
    sample, report = recovered
    est, truth = report.final_transform, sample.ground_truth
    assert math.degrees(geodesic_distance(est.rotation, truth.rotation)) < 0.5
    assert np.linalg.norm(est.translation - truth.translation) < 0.02
    assert report.converged and len(report.per_outer_step) <= 5


def test_report_invariants(recovered):
    sample, report = recovered
    losses = [report.initial_loss.combined] + [s.loss.combined for s in report.per_outer_step if s.accepted]
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    # Applying the accepted steps one after another equals the final transform.
    pts = sample.miscalib_cloud.points
    seq = pts
    for s in report.per_outer_step:
        if s.accepted:
            seq = s.step.apply(seq)
    assert np.abs(report.final_transform.apply(pts) - seq).max() < 1e-9
    assert np.abs(report.correction.matrix() - report.final_transform.matrix()).max() < 1e-12
    assert all(s.gradient.shape == (6,) and s.curvature.shape == (6,) for s in report.per_outer_step)


def test_calibrate_is_deterministic(scene):
    xi = Se3Params([0.02, 0.01, -0.03], np.radians([1.0, 0.5, -1.0]))
    sample = make_sample(synth_scene("ground_plane_boxes", 2000, 3), K, xi)
    cfg = SolverConfig(max_outer_iterations=2, max_inner_iterations=20)
    a = calibrate(sample.miscalib_cloud, sample.target_map, K, cfg=cfg)
    b = calibrate(sample.miscalib_cloud, sample.target_map, K, cfg=cfg)
    assert np.array_equal(a.final_transform.matrix(), b.final_transform.matrix())
    assert [s.loss for s in a.per_outer_step] == [s.loss for s in b.per_outer_step]
    assert all(np.array_equal(s.gradient, t.gradient) for s, t in zip(a.per_outer_step, b.per_outer_step))


def test_already_calibrated_input(scene):
    target_map = scatter(scene, K)
    cfg = SolverConfig(max_outer_iterations=1)
    report = calibrate(scene, target_map, K, cfg=cfg)
    assert report.converged
    assert np.abs(report.final_transform.matrix() - np.eye(4)).max() < 1e-6


def test_initial_extrinsic_is_composed(scene):
    # A LiDAR-frame cloud with a known extrinsic: the answer is that extrinsic.
    ext = RigidTransform(exp_so3(np.radians([0.5, -0.5, 0.3])), [0.02, -0.01, 0.03])
    lidar = PointCloud(inverse(ext).apply(scene.points))
    target_map = scatter(scene, K)
    cfg = SolverConfig(max_outer_iterations=1)
    report = calibrate(lidar, target_map, K, initial=ext, cfg=cfg)
    assert np.abs(report.final_transform.matrix() - ext.matrix()).max() < 1e-6


def test_two_stage_schedule_runs(scene):
    xi = Se3Params([0.02, 0.0, 0.0], np.radians([1.0, 0.0, 0.0]))
    sample = make_sample(synth_scene("ground_plane_boxes", 2000, 1), K, xi)
    cfg = SolverConfig(stage_schedule=DEFAULT_SCHEDULE[:2], max_outer_iterations=1, max_inner_iterations=20)
    report = calibrate(sample.miscalib_cloud, sample.target_map, K, cfg=cfg)
    before = geodesic_distance(np.eye(3), sample.ground_truth.rotation)
    after = geodesic_distance(report.final_transform.rotation, sample.ground_truth.rotation)
    assert after < before


def test_calibrate_input_errors(scene):
    target_map = scatter(scene, K)
    with pytest.raises(SolverError):
        calibrate(PointCloud(np.zeros((0, 3))), target_map, K)
    with pytest.raises(SolverError):
        calibrate(scene, SparseDepthMap.empty(*K.shape), K)
    with pytest.raises(SolverError):
        calibrate(scene, SparseDepthMap.empty(10, 10), K)
    # No shared pixel and no distance term: the objective is undefined.
    far = PointCloud(scene.points * [1, 1, -1])
    photo_only = SolverConfig(stage_schedule=(Stage("all", LossWeights(1.0, 0.0)),))
    with pytest.raises(SolverError):
        calibrate(far, target_map, K, cfg=photo_only)
    with pytest.raises(SolverError):
        calibrate(scene, target_map, K, expected_cloud=PointCloud(scene.points[:10]))


def test_provided_gradient_mode(aligned):
    cfg = replace(aligned.cfg, gradient_mode="provided")
    with pytest.raises(SolverError):
        solve_stage(np.zeros(6), "all", CHAMFER, cfg, aligned)
    calls = []

    def grad(x, problem, w):
        calls.append(1)
        return loss_gradient(x, problem, w, aligned.cfg)

    solve_stage(np.array([0.01, 0, 0, 0, 0, 0]), "v", CHAMFER, cfg, aligned, gradient_fn=grad)
    assert calls
