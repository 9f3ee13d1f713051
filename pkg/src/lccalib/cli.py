"""Command line: ``lccalib {calibrate,generate,evaluate,render}``.

Exit codes: 0 success (calibrate: converged), 1 input or usage error,
2 calibrate ran out of outer steps without converging. Log verbosity comes
from the ``LCCALIB_LOG_LEVEL`` environment variable (default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from typing import Optional

import numpy as np
from PIL import Image

from .camera import KITTI_HALF, PointCloud
from .datagen import SCENE_KINDS, DecalibrationSpec, make_sample, sample_decalibration, synth_scene
from .depthmap import read_depth_png, write_depth_png
from .fileio import (
    FormatError,
    RigConfig,
    decalibration_record,
    format_transform,
    read_lidar_bin,
    read_manifest,
    read_rig_config,
    read_transform,
    resolve,
    transform_from_list,
    transform_to_list,
    write_lidar_bin,
    write_manifest,
    write_rig_config,
    write_transform,
)
from .lie import RigidTransform, compose, inverse, log_so3, to_transform
from .losses import LossWeights
from .metrics import aggregate, calibration_error, summary_to_json, summary_to_text
from .solver import DEFAULT_SCHEDULE, SolverConfig, SolverError, SolverReport, calibrate

log = logging.getLogger("lccalib")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NOT_CONVERGED = 2
LOG_ENV = "LCCALIB_LOG_LEVEL"
DISTANCES = {"chamfer": "chamfer", "emd": "emd", "icp": "centroid_icp"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for non-convergence here.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _solver_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("solver")
    g.add_argument("--outer-iters", type=int, default=5, help="outer re-alignment steps (default 5)")
    g.add_argument(
        "--distance",
        choices=sorted(DISTANCES),
        default=None,
        help="cloud distance of the translation stage (default emd; icp needs --expected-cloud)",
    )
    g.add_argument("--alpha-ph", type=float, default=None, help="photometric weight of the rotation stage (default 1.0)")
    g.add_argument(
        "--beta-dist",
        type=float,
        default=None,
        help="distance weight of the rotation stage; fixes it instead of ramping 0.15 -> 1.75",
    )
    g.add_argument("--seed", type=int, default=0, help="seed recorded in the solver config")


def solver_config(args) -> SolverConfig:
    if args.outer_iters < 1:
        raise UsageError("--outer-iters must be >= 1")
    stages = list(DEFAULT_SCHEDULE)
    first, second = stages[0], stages[1]
    if args.alpha_ph is not None or args.beta_dist is not None:
        alpha = first.weights.alpha_ph if args.alpha_ph is None else args.alpha_ph
        beta = first.weights.beta_dist if args.beta_dist is None else args.beta_dist
        try:
            w = LossWeights(alpha, beta, first.weights.distance_kind)
        except ValueError as e:
            raise UsageError(str(e)) from e
        stages[0] = replace(first, weights=w, ramp_beta=first.ramp_beta and args.beta_dist is None)
    if args.distance is not None:
        stages[1] = replace(second, weights=replace(second.weights, distance_kind=DISTANCES[args.distance]))
    return SolverConfig(max_outer_iterations=args.outer_iters, stage_schedule=tuple(stages), seed=args.seed)


def _xi_summary(T: RigidTransform) -> dict:
    return {
        "translation_m": [float(v) for v in T.translation],
        "rotation_deg": [float(v) for v in np.degrees(log_so3(T.rotation))],
    }


def report_to_dict(report: SolverReport) -> dict:
    steps = []
    for k, s in enumerate(report.per_outer_step):
        steps.append(
            {
                "index": k,
                "accepted": s.accepted,
                "inner_iterations": s.inner_iterations,
                "step": _xi_summary(s.step),
                "loss": {
                    "photometric": s.loss.photometric,
                    "distance": s.loss.distance,
                    "combined": s.loss.combined,
                    "valid_pixel_overlap": s.loss.valid_pixel_overlap,
                },
                "gradient": [float(v) for v in s.gradient],
                "curvature": [float(v) for v in s.curvature],
            }
        )
    return {
        "schema_version": 1,
        "converged": report.converged,
        "final_transform": transform_to_list(report.final_transform),
        "correction": _xi_summary(report.correction),
        "initial_loss": report.initial_loss.combined,
        "outer_steps": steps,
        # Wall-clock time differs between runs; never compare it.
        "nondeterministic_wall_time_s": report.wall_time,
    }


def _load_rig(path: Optional[str]) -> RigConfig:
    if path is None:
        return RigConfig(KITTI_HALF)
    return read_rig_config(path)


def _initial(args, rig: RigConfig) -> RigidTransform:
    if getattr(args, "initial", None):
        return read_transform(args.initial)
    return rig.extrinsic if rig.extrinsic is not None else RigidTransform.identity()


def _check_file(path: Optional[str], flag: str) -> None:
    if path is not None and not os.path.isfile(path):
        raise UsageError(f"{flag}: no such file: {path}")


def cmd_calibrate(args) -> int:
    for path, flag in ((args.config, "--config"), (args.cloud, "--cloud"), (args.target_depth, "--target-depth"),
                       (args.initial, "--initial"), (args.expected_cloud, "--expected-cloud")):
        _check_file(path, flag)
    cfg = solver_config(args)
    if args.distance == "icp" and args.expected_cloud is None:
        raise UsageError("--distance icp needs --expected-cloud")
    rig = _load_rig(args.config)
    cloud = read_lidar_bin(args.cloud).points
    target = read_depth_png(args.target_depth)
    initial = _initial(args, rig)
    expected = read_lidar_bin(args.expected_cloud).points if args.expected_cloud else None
    report = calibrate(cloud, target, rig.K, initial=initial, cfg=cfg, expected_cloud=expected)
    text = format_transform(report.final_transform)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    if args.journal:
        with open(args.journal, "w", encoding="utf-8", newline="\n") as f:
            json.dump(report_to_dict(report), f, indent=2, sort_keys=True)
            f.write("\n")
    if args.overlay_dir:
        from .plotting import plot_overlay

        os.makedirs(args.overlay_dir, exist_ok=True)
        for name, T in (("before", initial), ("after", report.final_transform)):
            plot_overlay(PointCloud(T.apply(cloud.points)), rig.K, os.path.join(args.overlay_dir, f"overlay_{name}.png"),
                         background=target, title=name)
    n_acc = sum(s.accepted for s in report.per_outer_step)
    print(
        f"calibrate: {'converged' if report.converged else 'not converged'} after {len(report.per_outer_step)} "
        f"outer step(s), {n_acc} accepted",
        file=sys.stderr,
    )
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


def cmd_generate(args) -> int:
    _check_file(args.config, "--config")
    _check_file(args.cloud, "--cloud")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if args.rot_range_deg < 0 or args.trans_range_m < 0:
        raise UsageError("decalibration ranges must be non-negative")
    rig = _load_rig(args.config)
    os.makedirs(args.out_dir, exist_ok=True)
    reference = rig.extrinsic if rig.extrinsic is not None else RigidTransform.identity()
    if args.cloud:
        lidar = read_lidar_bin(args.cloud).points
    else:
        lidar = synth_scene(args.scene, args.density, args.seed)
        if rig.extrinsic is not None:
            # Synthetic scenes are built in the camera frame; express them in the LiDAR frame.
            lidar = PointCloud(inverse(reference).apply(lidar.points))
    cloud_name = "cloud.bin"
    write_lidar_bin(os.path.join(args.out_dir, cloud_name), lidar)
    # Re-read so samples are built from exactly the stored float32 points.
    lidar = read_lidar_bin(os.path.join(args.out_dir, cloud_name)).points
    write_rig_config(os.path.join(args.out_dir, "rig.txt"), RigConfig(rig.K, reference))
    spec = DecalibrationSpec(math.radians(args.rot_range_deg), args.trans_range_m, args.seed, args.count)
    camera_frame = PointCloud(reference.apply(lidar.points), lidar.intensity)
    records = []
    for i in range(args.count):
        xi = sample_decalibration(spec, i)
        sample = make_sample(camera_frame, rig.K, xi, i)
        depth_name = f"target_{i:05d}.png"
        write_depth_png(os.path.join(args.out_dir, depth_name), sample.target_map)
        initial = compose(to_transform(xi), reference)
        # Decalibrated starting point, for `calibrate --initial`.
        write_transform(os.path.join(args.out_dir, f"initial_{i:05d}.txt"), initial)
        records.append(
            {
                "sample_id": i,
                "cloud": cloud_name,
                "config": "rig.txt",
                "target_depth": depth_name,
                "initial": transform_to_list(initial),
                "reference": transform_to_list(reference),
                "decalibration": decalibration_record(xi),
                "seed": args.seed,
            }
        )
    write_manifest(os.path.join(args.out_dir, "manifest.jsonl"), records)
    print(f"generate: wrote {len(records)} sample(s) to {args.out_dir}", file=sys.stderr)
    return EXIT_OK


def _evaluate_one(manifest_path: str, rec: dict, cfg: SolverConfig):
    rig = read_rig_config(resolve(manifest_path, rec["config"]))
    cloud = read_lidar_bin(resolve(manifest_path, rec["cloud"])).points
    target = read_depth_png(resolve(manifest_path, rec["target_depth"]))
    where = f"{manifest_path}: sample {rec['sample_id']}"
    initial = transform_from_list(rec["initial"], where)
    reference = transform_from_list(rec["reference"], where)
    report = calibrate(cloud, target, rig.K, initial=initial, cfg=cfg)
    err = calibration_error(report.final_transform, reference)
    return rec["sample_id"], err, report.converged, len(report.per_outer_step)


def cmd_evaluate(args) -> int:
    _check_file(args.manifest, "--manifest")
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    cfg = solver_config(args)
    if args.distance == "icp":
        raise UsageError("evaluate does not support --distance icp (no corresponded expected clouds)")
    records = read_manifest(args.manifest)
    if args.limit is not None:
        records = records[: args.limit]
    if not records:
        raise UsageError(f"{args.manifest}: manifest has no records")
    if args.workers == 1:
        results = [_evaluate_one(args.manifest, r, cfg) for r in records]
    else:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_evaluate_one, [args.manifest] * len(records), records, [cfg] * len(records)))
    results.sort(key=lambda r: r[0])
    summary = aggregate([r[1] for r in results])
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "summary.json"), "w", encoding="utf-8", newline="\n") as f:
        f.write(summary_to_json(summary))
    with open(os.path.join(args.out_dir, "summary.txt"), "w", encoding="utf-8", newline="\n") as f:
        f.write(summary_to_text(summary))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "geodesic_deg", "translation_m", "yaw_deg", "pitch_deg", "roll_deg",
                "dx_m", "dy_m", "dz_m", "converged", "outer_steps"])
    for sid, e, conv, n in results:
        w.writerow([sid, repr(math.degrees(e.geodesic_rot)), repr(e.translation_err)]
                   + [repr(float(v)) for v in np.degrees(e.per_axis_rot)]
                   + [repr(float(v)) for v in e.per_axis_trans] + [int(conv), n])
    with open(os.path.join(args.out_dir, "per_sample.csv"), "w", encoding="utf-8", newline="") as f:
        f.write(buf.getvalue())
    if not args.no_plots:
        from .plotting import plot_summary_histograms

        plot_summary_histograms(
            summary, os.path.join(args.out_dir, "hist_rotation.png"), os.path.join(args.out_dir, "hist_translation.png")
        )
    sys.stdout.write(summary_to_text(summary))
    return EXIT_OK


def cmd_render(args) -> int:
    for path, flag in ((args.config, "--config"), (args.cloud, "--cloud"), (args.transform, "--transform"),
                       (args.image, "--image"), (args.target_depth, "--target-depth")):
        _check_file(path, flag)
    rig = _load_rig(args.config)
    cloud = read_lidar_bin(args.cloud).points
    T = read_transform(args.transform) if args.transform else _initial(args, rig)
    image = None
    if args.image:
        try:
            with Image.open(args.image) as im:
                image = np.asarray(im.convert("RGB"))
        except OSError as e:
            raise FormatError(f"{args.image}: cannot read image ({e})") from e
        if image.shape[:2] != rig.K.shape:
            raise UsageError(f"--image is {image.shape[1]}x{image.shape[0]}, camera is {rig.K.width}x{rig.K.height}")
    background = read_depth_png(args.target_depth) if args.target_depth else None
    from .plotting import plot_overlay

    n = plot_overlay(PointCloud(T.apply(cloud.points)), rig.K, args.out, image=image, background=background)
    print(f"render: {n} point(s) in view, wrote {args.out}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lccalib", description="LiDAR-camera extrinsic calibration by direct loss minimisation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("calibrate", help="estimate the LiDAR->camera transform for one scan")
    c.add_argument("--config", help="rig config (intrinsics, optional initial extrinsic); default KITTI half-res")
    c.add_argument("--cloud", required=True, help="LiDAR scan, KITTI .bin")
    c.add_argument("--target-depth", required=True, help="target depth map, 16-bit PNG in mm")
    c.add_argument("--initial", help="initial transform file (overrides the config extrinsic)")
    c.add_argument("--expected-cloud", help="index-corresponded camera-frame cloud for --distance icp")
    c.add_argument("--out", help="write the transform here instead of stdout")
    c.add_argument("--journal", help="write the solver report as JSON")
    c.add_argument("--overlay-dir", help="write before/after overlay PNGs here")
    _solver_args(c)
    c.set_defaults(func=cmd_calibrate)

    g = sub.add_parser("generate", help="write a decalibrated sample set and manifest")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--config", help="rig config; its extrinsic is the reference calibration")
    g.add_argument("--cloud", help="LiDAR scan to decalibrate instead of a synthetic scene")
    g.add_argument("--scene", choices=SCENE_KINDS, default="ground_plane_boxes")
    g.add_argument("--density", type=int, default=5000, help="points in the synthetic scene")
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--rot-range-deg", type=float, default=10.0, help="per-axis half-width (default 10)")
    g.add_argument("--trans-range-m", type=float, default=0.2, help="per-axis half-width (default 0.2)")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="calibrate every manifest sample and summarise the errors")
    e.add_argument("--manifest", required=True)
    e.add_argument("--out-dir", required=True)
    e.add_argument("--workers", type=int, default=1, help="parallel solves (default 1)")
    e.add_argument("--limit", type=int, help="only the first N records")
    e.add_argument("--no-plots", action="store_true", help="skip the histogram figures")
    _solver_args(e)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("render", help="overlay a projected scan on an image or depth map")
    r.add_argument("--config", help="rig config; default KITTI half-res")
    r.add_argument("--cloud", required=True)
    r.add_argument("--transform", help="transform file (default: config extrinsic, else identity)")
    r.add_argument("--image", help="RGB image (PNG) drawn underneath")
    r.add_argument("--target-depth", help="depth map drawn underneath when there is no image")
    r.add_argument("--out", required=True, help="output PNG")
    r.set_defaults(func=cmd_render, initial=None)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, FormatError, SolverError, ValueError, OSError) as e:
        print(f"lccalib {args.command}: error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
