"""Calibration error metrics and their aggregation over a test set."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .lie import RigidTransform, hat, log_so3

SCHEMA_VERSION = 1

DEFAULT_ROT_EDGES_DEG = (0.0, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 180.0)
DEFAULT_TRANS_EDGES_M = (0.0, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1e9)

# |pitch| must stay below pi/2 minus this margin for a unique Z-Y-X decomposition.
GIMBAL_MARGIN = 1e-6


class GimbalLockError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CalibrationError:
    geodesic_rot: float  # radians, in [0, pi]
    translation_err: float  # meters
    per_axis_rot: np.ndarray  # signed (yaw, pitch, roll) of the residual rotation, radians
    per_axis_trans: np.ndarray  # signed estimate - truth, meters (x, y, z)


def geodesic_distance(Ri, Rj) -> float:
    """``||log(Ri^T Rj)||_F / sqrt(2)``, i.e. the angle of the relative rotation."""
    rel = np.asarray(Ri, dtype=float).T @ np.asarray(Rj, dtype=float)
    return float(np.linalg.norm(hat(log_so3(rel)), "fro") / math.sqrt(2.0))


def translation_error(xi, xj) -> float:
    return float(np.linalg.norm(np.asarray(xi, dtype=float) - np.asarray(xj, dtype=float)))


def euler_compose(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """``Rz(yaw) @ Ry(pitch) @ Rx(roll)``."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    Rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    Ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    Rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return Rz @ Ry @ Rx


def euler_decompose(R) -> tuple[float, float, float]:
    """Z-Y-X (yaw about z, pitch about y, roll about x) angles of ``R``."""
    R = np.asarray(R, dtype=float)
    s = -R[2, 0]
    if abs(s) >= math.sin(math.pi / 2 - GIMBAL_MARGIN):
        raise GimbalLockError(f"pitch too close to +-90 deg (sin(pitch)={s:.9f})")
    pitch = math.asin(max(-1.0, min(1.0, s)))
    yaw = math.atan2(R[1, 0], R[0, 0])
    roll = math.atan2(R[2, 1], R[2, 2])
    return yaw, pitch, roll


def calibration_error(estimate: RigidTransform, truth: RigidTransform) -> CalibrationError:
    rel = truth.rotation.T @ estimate.rotation
    return CalibrationError(
        geodesic_rot=geodesic_distance(estimate.rotation, truth.rotation),
        translation_err=translation_error(estimate.translation, truth.translation),
        per_axis_rot=np.array(euler_decompose(rel)),
        per_axis_trans=np.asarray(estimate.translation - truth.translation, dtype=float),
    )


def _hist(values: np.ndarray, edges: Sequence[float]) -> dict:
    counts, _ = np.histogram(values, bins=np.asarray(edges, dtype=float))
    return {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts]}


def aggregate(
    errors: Sequence[CalibrationError],
    rot_edges_deg: Sequence[float] = DEFAULT_ROT_EDGES_DEG,
    trans_edges_m: Sequence[float] = DEFAULT_TRANS_EDGES_M,
    success_rot_deg: float = 0.5,
    success_trans_m: float = 0.02,
) -> dict:
    """Summary statistics; angles are reported in degrees, distances in meters."""
    if not errors:
        raise ValueError("cannot aggregate an empty list of errors")
    geo = np.degrees([e.geodesic_rot for e in errors])
    tr = np.array([e.translation_err for e in errors])
    rot_axes = np.degrees(np.abs(np.array([e.per_axis_rot for e in errors])))
    trans_axes = np.abs(np.array([e.per_axis_trans for e in errors]))
    ok = (geo < success_rot_deg) & (tr < success_trans_m)
    return {
        "schema_version": SCHEMA_VERSION,
        "count": len(errors),
        "mae_rot_deg": dict(zip(("yaw", "pitch", "roll"), map(float, rot_axes.mean(axis=0)))),
        "mae_trans_m": dict(zip(("x", "y", "z"), map(float, trans_axes.mean(axis=0)))),
        "geodesic_deg": {"mean": float(geo.mean()), "median": float(np.median(geo)), "max": float(geo.max())},
        "translation_m": {"mean": float(tr.mean()), "median": float(np.median(tr)), "max": float(tr.max())},
        "success": {
            "rot_deg_below": success_rot_deg,
            "trans_m_below": success_trans_m,
            "rate": float(ok.mean()),
        },
        "histogram_geodesic_deg": _hist(geo, rot_edges_deg),
        "histogram_translation_m": _hist(tr, trans_edges_m),
    }


def summary_to_json(summary: dict) -> str:
    return json.dumps(summary, indent=2, sort_keys=True) + "\n"


def summary_to_text(summary: dict) -> str:
    r = summary["mae_rot_deg"]
    t = summary["mae_trans_m"]
    g = summary["geodesic_deg"]
    d = summary["translation_m"]
    lines = [
        f"calibration summary (schema {summary['schema_version']}), {summary['count']} samples",
        f"  rotation MAE [deg]     yaw {r['yaw']:.4f}  pitch {r['pitch']:.4f}  roll {r['roll']:.4f}",
        f"  translation MAE [cm]   x {t['x'] * 100:.3f}  y {t['y'] * 100:.3f}  z {t['z'] * 100:.3f}",
        f"  geodesic [deg]         mean {g['mean']:.4f}  median {g['median']:.4f}  max {g['max']:.4f}",
        f"  translation [cm]       mean {d['mean'] * 100:.3f}  median {d['median'] * 100:.3f}  max {d['max'] * 100:.3f}",
        f"  success rate           {summary['success']['rate'] * 100:.1f}%"
        f" (< {summary['success']['rot_deg_below']} deg and < {summary['success']['trans_m_below'] * 100:g} cm)",
    ]
    for key, unit in (("histogram_geodesic_deg", "deg"), ("histogram_translation_m", "m")):
        h = summary[key]
        lines.append(f"  {key}:")
        for lo, hi, n in zip(h["edges"][:-1], h["edges"][1:], h["counts"]):
            lines.append(f"    [{lo:g}, {hi:g}) {unit}: {n}")
    return "\n".join(lines) + "\n"
