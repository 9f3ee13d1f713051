"""Acceptance suite: one PASS/FAIL line per criterion.

Each test prints its verdict with the measured numbers, then asserts it. The
end-to-end trials (criteria 6 and 7) take several minutes on one core.
Criterion 8 needs a real scan and is skipped unless ``LCCALIB_KITTI_DIR``
points at a directory with ``scan.bin`` and ``rig.txt`` (see the README).
"""

import math
import os
import time

import numpy as np
import pytest

from lccalib.camera import KITTI_HALF, PointCloud, back_project_points, project_points, scale_intrinsics
from lccalib.cli import main
from lccalib.datagen import DecalibrationSpec, make_sample, sample_decalibration, synth_scene
from lccalib.fileio import read_lidar_bin, read_rig_config
from lccalib.lie import RigidTransform, compose, exp_so3, inverse, log_so3, to_transform
from lccalib.losses import LossWeights, centroid_icp_distance, chamfer_distance, emd_distance
from lccalib.metrics import calibration_error
from lccalib.solver import DEFAULT_SCHEDULE, Problem, SolverConfig, calibrate, loss_gradient
from lccalib.transformer import lift, resample_depth_map, scatter
from lccalib.depthmap import SparseDepthMap

from oracles import chamfer_brute, emd_permutations, expm_taylor, homogeneous

K = KITTI_HALF
N_TRIALS = 50


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} | {detail}")
    assert ok, detail


def test_criterion_1_lie_group(capsys):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    axes = rng.normal(size=(1000, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    omegas = axes * rng.uniform(1e-6, math.pi - 0.01, (1000, 1))
    rt = taylor = grp = 0.0
    for w in omegas:
        R = exp_so3(w)
        rt = max(rt, np.linalg.norm(log_so3(R) - w))
        W = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
        taylor = max(taylor, np.linalg.norm(R - expm_taylor(W), "fro"))
        A = RigidTransform(R, rng.uniform(-5, 5, 3))
        B = RigidTransform(exp_so3(rng.normal(size=3)), rng.uniform(-5, 5, 3))
        grp = max(grp, np.abs(compose(A, B).matrix() - homogeneous(A) @ homogeneous(B)).max())
        grp = max(grp, np.abs(inverse(A).matrix() - np.linalg.inv(homogeneous(A))).max())
    dt = time.perf_counter() - t0
    ok = rt < 1e-9 and taylor < 1e-12 and grp < 1e-12 and dt < 1.0
    verdict(capsys, 1, ok, f"round trip {rt:.2e}, Taylor {taylor:.2e}, homogeneous {grp:.2e}, {dt:.2f} s")


def test_criterion_2_projection(capsys):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    uv = rng.uniform([0, 0], [K.width, K.height], size=(10000, 2))
    z = rng.uniform(0.5, 80.0, 10000)
    uv2, _, ok_view = project_points(back_project_points(uv, z, K), K)
    ident = float(np.abs(uv2 - uv).max())
    cov = 0.0
    p = back_project_points(uv, z, K)
    for s in (0.25, 0.5, 2.0, 3.0):
        uvs, _, _ = project_points(p, scale_intrinsics(K, s, s))
        cov = max(cov, float(np.abs(uvs - s * uv2).max()))
    dt = time.perf_counter() - t0
    ok = bool(ok_view.all()) and ident < 1e-9 and cov < 1e-9 and dt < 1.0
    verdict(capsys, 2, ok, f"identity {ident:.2e} px, scale covariance {cov:.2e} px, {dt:.2f} s")


def test_criterion_3_distance_oracles(capsys):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    ch = 0.0
    for _ in range(200):
        a = rng.normal(size=(rng.integers(50, 501), 3))
        b = rng.normal(size=(rng.integers(50, 501), 3))
        ch = max(ch, abs(chamfer_distance(a, b) - chamfer_brute(a, b)))
    em = 0.0
    for _ in range(100):
        a, b = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        em = max(em, abs(emd_distance(a, b) - emd_permutations(a, b)))
    a, b = rng.normal(size=(300, 3)), rng.normal(size=(300, 3))
    zero = max(chamfer_distance(a, a), emd_distance(a, a),
               centroid_icp_distance(a, a, RigidTransform.identity(), 32))
    # Under a non-trivial transform the centroids agree only to rounding.
    T = RigidTransform(exp_so3([0.3, -0.2, 0.1]), [1.0, 2.0, -0.5])
    moved = centroid_icp_distance(T.apply(a), a, T, 32)
    sym = max(abs(chamfer_distance(a, b) - chamfer_distance(b, a)), abs(emd_distance(a, b) - emd_distance(b, a)))
    dt = time.perf_counter() - t0
    ok = ch < 1e-9 and em < 1e-9 and zero == 0.0 and moved < 1e-20 and sym < 1e-9 and dt < 30.0
    verdict(capsys, 3, ok, f"chamfer {ch:.2e}, EMD {em:.2e}, identical {zero:.1e}, corresponded-aligned {moved:.1e}, "
            f"symmetry {sym:.2e}, {dt:.1f} s")


def test_criterion_4_gradients(capsys):
    scene = synth_scene("ground_plane_boxes", 5000, 0)
    target_map = scatter(scene, K)
    rng = np.random.default_rng(0)
    coarse = SolverConfig(fd_step_rot=1e-4, fd_step_trans=1e-4)
    fine = SolverConfig(fd_step_rot=1e-5, fd_step_trans=1e-5)
    xs = [np.r_[rng.uniform(-0.2, 0.2, 3), rng.uniform(-1, 1, 3) * math.radians(10)] for _ in range(50)]
    worst = {}
    for kind in ("chamfer", "emd", "centroid_icp"):
        p = Problem(lift(target_map, K).points, target_map, K, SolverConfig(),
                    expected=scene.points, corresponded=scene.points)
        if kind == "emd":
            p.begin_stage(np.zeros(6))
        w = LossWeights(0.0, 1.0, kind)
        errs = []
        for x in xs:
            g4, g5 = loss_gradient(x, p, w, coarse), loss_gradient(x, p, w, fine)
            errs.append(np.linalg.norm(g4 - g5) / np.linalg.norm(g5))
        worst[kind] = (max(errs), sum(e < 1e-3 for e in errs))
    # One point at (0, 0, 5), its only target neighbour at (1, 0, 5).
    Kp = K.__class__(50.0, 50.0, 10.5, 5.5, 31, 11)
    tv = np.zeros((11, 31))
    tv[5, 20] = 5.0
    p1 = Problem(np.array([[0.0, 0.0, 5.0]]), SparseDepthMap(tv), Kp, SolverConfig())
    g1 = loss_gradient(np.zeros(6), p1, LossWeights(0.0, 1.0, "chamfer"), p1.cfg, active=(0, 1, 2))
    closed = float(np.abs(g1[:3] - [-4.0, 0.0, 0.0]).max())
    ok = all(m < 1e-3 for m, _ in worst.values()) and closed < 1e-6
    detail = ", ".join(f"{k} max {m:.2e} ({n}/50 < 1e-3)" for k, (m, n) in worst.items())
    verdict(capsys, 4, ok, f"{detail}, one-point closed form {closed:.1e}")


def test_criterion_5_spatial_transformer(capsys):
    scene = synth_scene("ground_plane_boxes", 5000, 0)
    m = scatter(scene, K)
    same = resample_depth_map(m, RigidTransform.identity(), K)
    exact = bool(np.array_equal(same.values, m.values))
    # Regime fixed by the pilot: fronto plane at 10 m, +-1 deg / +-0.2 m.
    plane = SparseDepthMap(np.full(K.shape, 10.0))
    spec = DecalibrationSpec(math.radians(1.0), 0.2, seed=0)
    rates = []
    for i in range(20):
        T = to_transform(sample_decalibration(spec, i))
        back = resample_depth_map(resample_depth_map(plane, T, K), inverse(T), K)
        good = back.valid & (np.abs(back.values - plane.values) < 1e-3)
        rates.append(np.count_nonzero(good) / plane.valid_count())
    ok = exact and min(rates) >= 0.90 and float(np.median(rates)) >= 0.95
    verdict(capsys, 5, ok, f"identity exact {exact}, recovery min {min(rates):.3f} median {np.median(rates):.3f}")


def _trials(outer, schedule=DEFAULT_SCHEDULE, n=N_TRIALS):
    scene = synth_scene("ground_plane_boxes", 5000, 0)
    spec = DecalibrationSpec(seed=0)
    cfg = SolverConfig(max_outer_iterations=outer, stage_schedule=schedule)
    out = []
    for i in range(n):
        s = make_sample(scene, K, sample_decalibration(spec, i), i)
        t0 = time.perf_counter()
        rep = calibrate(s.miscalib_cloud, s.target_map, K, cfg=cfg)
        dt = time.perf_counter() - t0
        err = calibration_error(rep.final_transform, s.ground_truth)
        weakest = min(float(np.min(st.curvature)) for st in rep.per_outer_step)
        out.append((math.degrees(err.geodesic_rot), err.translation_err, dt, weakest))
    return np.array(out)


@pytest.fixture(scope="module")
def five_step():
    return _trials(5)


def test_criterion_6_end_to_end(capsys, five_step):
    rot, tr, dt, curv = five_step.T
    good = (rot < 0.5) & (tr < 0.02)
    rate, med_rot, med_tr = good.mean(), np.median(rot), np.median(tr)
    if good.all():
        corr_ok, corr = True, "no failures to diagnose"
    else:
        # Failed trials should sit in flatter basins than successful ones.
        corr_ok = bool(np.median(curv[~good]) < np.median(curv[good]))
        corr = f"weakest curvature median {np.median(curv[~good]):.3g} (failed) vs {np.median(curv[good]):.3g}"
    ok = rate >= 0.8 and med_rot < 0.2 and med_tr < 0.01 and corr_ok and dt.max() < 30.0
    verdict(capsys, 6, ok, f"success {rate:.0%}, median {med_rot:.4f} deg / {med_tr * 100:.3f} cm, "
            f"{corr}, slowest trial {dt.max():.1f} s")


def test_criterion_6_two_stage_reference(capsys):
    # Informational: the omega/v schedule without the joint polish, first ten trials.
    res = _trials(5, DEFAULT_SCHEDULE[:2], n=10)
    rot, tr = res[:, 0], res[:, 1]
    with capsys.disabled():
        print(f"\ncriterion 6 (info, two-stage schedule, 10 trials): success {np.mean((rot < 0.5) & (tr < 0.02)):.0%}, "
              f"median {np.median(rot):.3f} deg / {np.median(tr) * 100:.2f} cm")


def test_criterion_7_realignment(capsys, five_step):
    one = _trials(1)
    m5, m1 = float(np.median(five_step[:, 0])), float(np.median(one[:, 0]))
    verdict(capsys, 7, m5 <= m1, f"median geodesic 5 steps {m5:.4f} deg, 1 step {m1:.4f} deg")


def test_criterion_8_kitti_smoke(capsys):
    root = os.environ.get("LCCALIB_KITTI_DIR")
    if not root or not os.path.isfile(os.path.join(root, "scan.bin")):
        with capsys.disabled():
            print("\ncriterion 8: SKIPPED | set LCCALIB_KITTI_DIR to a directory with scan.bin and rig.txt")
        pytest.skip("KITTI data not available")
    rig = read_rig_config(os.path.join(root, "rig.txt"))
    assert rig.extrinsic is not None, "rig.txt needs the reference extrinsic"
    cloud = read_lidar_bin(os.path.join(root, "scan.bin")).points
    cam = PointCloud(rig.extrinsic.apply(cloud.points))
    target = scatter(cam, rig.K)
    xi = sample_decalibration(DecalibrationSpec(math.radians(5.0), 0.1, seed=0), 0)
    initial = compose(to_transform(xi), rig.extrinsic)
    rep = calibrate(cloud, target, rig.K, initial=initial)
    before = calibration_error(initial, rig.extrinsic).geodesic_rot
    after = calibration_error(rep.final_transform, rig.extrinsic).geodesic_rot
    reduction = 1.0 - after / before
    verdict(capsys, 8, reduction >= 0.9, f"geodesic {math.degrees(before):.3f} -> {math.degrees(after):.3f} deg "
            f"({reduction:.1%} reduction)")


def test_criterion_9_determinism(capsys, tmp_path):
    gen = tmp_path / "gen"
    assert main(["generate", "--out-dir", str(gen), "--count", "20", "--density", "2000", "--seed", "9",
                 "--rot-range-deg", "3", "--trans-range-m", "0.05"]) == 0
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["evaluate", "--manifest", str(gen / "manifest.jsonl"), "--out-dir", str(out)]) == 0
        outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    a, b = outputs
    same = sorted(a) == sorted(b) and all(a[k] == b[k] for k in a)
    verdict(capsys, 9, same, f"{len(a)} output files compared byte for byte: {', '.join(sorted(a))}")
