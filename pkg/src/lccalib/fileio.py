"""File formats: KITTI LiDAR scans, rig configs, transform files and sample manifests.

Rig configs and transform files share one line-oriented text format::

    # comment
    key: value

Values are whitespace-separated numbers. Every parse failure raises
``FormatError`` naming the file and, where it applies, the line.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .camera import CameraIntrinsics, PointCloud
from .lie import RigidTransform, Se3Params, log_so3, transform_to_xi

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
LIDAR_RECORD = np.dtype("<f4")  # four per record: x, y, z, reflectance
RECORD_BYTES = 16
ORTHONORMAL_TOL = 1e-3

RIG_REQUIRED = ("fx", "fy", "cx", "cy", "width", "height")
RIG_OPTIONAL = ("schema_version", "extrinsic")
TRANSFORM_KEYS = ("schema_version", "convention", "matrix", "translation_m", "rotation_deg")
CONVENTION = "lidar_to_camera p_cam = R * p_lidar + t"


class FormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LidarFrame:
    points: PointCloud
    path: str
    count: int
    rejected: int  # records dropped for non-finite values


@dataclass(frozen=True, eq=False)
class RigConfig:
    K: CameraIntrinsics
    extrinsic: Optional[RigidTransform] = None  # LiDAR -> camera reference, if known

    @property
    def image_size(self) -> tuple[int, int]:
        return self.K.width, self.K.height


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise FormatError(f"{path}: cannot read ({e.strerror or e})") from e


def read_lidar_bin(path) -> LidarFrame:
    """Parse a KITTI velodyne scan; reflectance becomes the cloud intensity."""
    raw = _read_bytes(path)
    if len(raw) % RECORD_BYTES:
        raise FormatError(f"{path}: size {len(raw)} bytes is not a multiple of the {RECORD_BYTES}-byte record")
    rec = np.frombuffer(raw, dtype=LIDAR_RECORD).reshape(-1, 4).astype(float)
    finite = np.isfinite(rec).all(axis=1)
    rejected = int(np.count_nonzero(~finite))
    if rejected:
        log.warning("%s: rejected %d non-finite record(s) of %d", path, rejected, len(rec))
    rec = rec[finite]
    return LidarFrame(PointCloud(rec[:, :3], rec[:, 3]), str(path), len(rec), rejected)


def write_lidar_bin(path, cloud: PointCloud) -> None:
    rec = np.zeros((len(cloud), 4), dtype=LIDAR_RECORD)
    rec[:, :3] = cloud.points
    if cloud.intensity is not None:
        rec[:, 3] = cloud.intensity
    with open(path, "wb") as f:
        f.write(rec.tobytes())


def _parse_lines(path) -> dict:
    """``key -> (line_number, [tokens])``; duplicate keys are an error."""
    try:
        text = _read_bytes(path).decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: not UTF-8 text") from e
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if ":" not in body:
            raise FormatError(f"{path}:{n}: expected 'key: value', got {line.strip()!r}")
        key, value = body.split(":", 1)
        key = key.strip()
        if key in out:
            raise FormatError(f"{path}:{n}: duplicate key {key!r} (first on line {out[key][0]})")
        out[key] = (n, value.split())
    return out


def _numbers(path, entries: dict, key: str, count: int) -> list[float]:
    n, tokens = entries[key]
    if len(tokens) != count:
        raise FormatError(f"{path}:{n}: {key} needs {count} number(s), got {len(tokens)}")
    try:
        vals = [float(t) for t in tokens]
    except ValueError as e:
        raise FormatError(f"{path}:{n}: {key}: {e}") from e
    if not all(math.isfinite(v) for v in vals):
        raise FormatError(f"{path}:{n}: {key} must be finite")
    return vals


def _check_schema(path, entries: dict) -> None:
    if "schema_version" in entries:
        n = entries["schema_version"][0]
        (v,) = _numbers(path, entries, "schema_version", 1)
        if v != SCHEMA_VERSION:
            raise FormatError(f"{path}:{n}: unsupported schema_version {v:g}, expected {SCHEMA_VERSION}")


def _rigid_from_12(path, line: int, key: str, vals: list[float]) -> RigidTransform:
    M = np.array(vals).reshape(3, 4)
    R = M[:, :3]
    err = float(np.max(np.abs(R.T @ R - np.eye(3))))
    if err > ORTHONORMAL_TOL or np.linalg.det(R) <= 0:
        raise FormatError(
            f"{path}:{line}: {key} rotation fails the orthonormality check "
            f"(max |R^T R - I| = {err:.3g}, det = {np.linalg.det(R):.6g}, tolerance {ORTHONORMAL_TOL:g})"
        )
    if err > 1e-9:
        # Re-orthonormalize small numerical drift from rounded files.
        U, _, Vt = np.linalg.svd(R)
        R = U @ Vt
    return RigidTransform(R, M[:, 3])


def read_rig_config(path) -> RigConfig:
    entries = _parse_lines(path)
    for key in entries:
        if key not in RIG_REQUIRED and key not in RIG_OPTIONAL:
            log.warning("%s:%d: unknown key %r ignored", path, entries[key][0], key)
    missing = [k for k in RIG_REQUIRED if k not in entries]
    if missing:
        raise FormatError(f"{path}: missing required key(s): {', '.join(missing)}")
    _check_schema(path, entries)
    vals = {k: _numbers(path, entries, k, 1)[0] for k in RIG_REQUIRED}
    for k in ("width", "height"):
        if vals[k] != int(vals[k]):
            raise FormatError(f"{path}:{entries[k][0]}: {k} must be an integer")
    try:
        K = CameraIntrinsics(
            vals["fx"], vals["fy"], vals["cx"], vals["cy"], int(vals["width"]), int(vals["height"])
        )
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e
    extrinsic = None
    if "extrinsic" in entries:
        line = entries["extrinsic"][0]
        extrinsic = _rigid_from_12(path, line, "extrinsic", _numbers(path, entries, "extrinsic", 12))
    return RigConfig(K, extrinsic)


def _fmt(values: Iterable[float]) -> str:
    return " ".join(repr(float(v)) for v in values)


def write_rig_config(path, rig: RigConfig) -> None:
    K = rig.K
    lines = [
        "# camera intrinsics (pixels) and optional LiDAR -> camera extrinsic",
        f"schema_version: {SCHEMA_VERSION}",
        f"fx: {K.fx!r}",
        f"fy: {K.fy!r}",
        f"cx: {K.cx!r}",
        f"cy: {K.cy!r}",
        f"width: {K.width}",
        f"height: {K.height}",
    ]
    if rig.extrinsic is not None:
        lines.append("# 3x4 [R | t] row-major, p_cam = R * p_lidar + t")
        lines.append(f"extrinsic: {_fmt(rig.extrinsic.matrix()[:3].ravel())}")
    _write_text(path, "\n".join(lines) + "\n")


def format_transform(T: RigidTransform) -> str:
    """Transform file text; only ``matrix`` is read back, the rest is for people."""
    xi = transform_to_xi(T)
    return "\n".join(
        [
            "# LiDAR -> camera extrinsic. Points map as p_cam = R * p_lidar + t.",
            "# matrix: 3x4 [R | t] row-major, meters.",
            f"schema_version: {SCHEMA_VERSION}",
            f"convention: {CONVENTION}",
            f"matrix: {_fmt(T.matrix()[:3].ravel())}",
            f"translation_m: {_fmt(T.translation)}",
            "# rotation vector (axis * angle) of R, degrees",
            f"rotation_deg: {_fmt(np.degrees(log_so3(T.rotation)))}",
            f"# twist (v in m, omega in deg): {_fmt(xi.v)} {_fmt(np.degrees(xi.omega))}",
        ]
    ) + "\n"


def write_transform(path, T: RigidTransform) -> None:
    _write_text(path, format_transform(T))


def read_transform(path) -> RigidTransform:
    entries = _parse_lines(path)
    for key in entries:
        if key not in TRANSFORM_KEYS:
            log.warning("%s:%d: unknown key %r ignored", path, entries[key][0], key)
    if "matrix" not in entries:
        raise FormatError(f"{path}: missing required key: matrix")
    _check_schema(path, entries)
    line = entries["matrix"][0]
    return _rigid_from_12(path, line, "matrix", _numbers(path, entries, "matrix", 12))


def transform_to_list(T: RigidTransform) -> list[float]:
    return [float(v) for v in T.matrix()[:3].ravel()]


def transform_from_list(values, where: str = "transform") -> RigidTransform:
    vals = [float(v) for v in values]
    if len(vals) != 12:
        raise FormatError(f"{where}: expected 12 numbers, got {len(vals)}")
    return _rigid_from_12(where, 0, "transform", vals)


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def write_manifest(path, records: Iterable[dict]) -> None:
    _write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def read_manifest(path) -> list[dict]:
    """Records of a JSON-lines manifest; relative paths stay relative to its directory."""
    try:
        text = _read_bytes(path).decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: not UTF-8 text") from e
    records = []
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}:{n}: invalid JSON ({e.msg})") from e
        if not isinstance(rec, dict):
            raise FormatError(f"{path}:{n}: record must be a JSON object")
        for key in ("sample_id", "cloud", "target_depth", "config", "initial", "reference"):
            if key not in rec:
                raise FormatError(f"{path}:{n}: record lacks {key!r}")
        records.append(rec)
    return records


def resolve(base_file, rel: str) -> str:
    return rel if os.path.isabs(rel) else os.path.join(os.path.dirname(os.path.abspath(base_file)), rel)


def decalibration_record(xi: Se3Params) -> dict:
    return {"v_m": [float(v) for v in xi.v], "omega_deg": [float(v) for v in np.degrees(xi.omega)]}
