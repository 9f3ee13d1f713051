"""SO(3)/SE(3) helpers used by the calibration pipeline.

Conventions:
    - Rotation vectors (axis-angle) are in radians; ``norm(omega)`` is the angle.
    - A transform maps points as ``p' = R @ p + t``.
    - ``Se3Params`` is the 6-vector ``(v, omega)``; ``to_transform`` pairs
      ``exp_so3(omega)`` with the raw translation ``v`` (no SE(3) V-matrix).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Below this angle Rodrigues' coefficients are replaced by their Taylor series.
SMALL_ANGLE = 1e-8

# Near pi the axis is taken from the symmetric part of R instead of the skew part.
NEAR_PI = 1e-6


def _frozen(a, shape) -> np.ndarray:
    arr = np.array(a, dtype=float).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Se3Params:
    """Pose increment ``xi = (v, omega)``: translation in meters, rotation vector in radians."""

    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "v", _frozen(self.v, 3))
        object.__setattr__(self, "omega", _frozen(self.omega, 3))
        if not (np.all(np.isfinite(self.v)) and np.all(np.isfinite(self.omega))):
            raise ValueError("Se3Params components must be finite")

    @classmethod
    def from_vector(cls, xi) -> "Se3Params":
        xi = np.asarray(xi, dtype=float).reshape(6)
        return cls(xi[:3], xi[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.v, self.omega])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation matrix plus translation; ``apply`` maps points ``R p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen(self.translation, 3))
        if not np.all(np.isfinite(self.translation)):
            raise ValueError("translation must be finite")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        """Build from a 4x4 homogeneous or 3x4 ``[R | t]`` matrix."""
        m = np.asarray(m, dtype=float)
        if m.shape not in ((4, 4), (3, 4)):
            raise ValueError(f"expected a 3x4 or 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Transform an (N, 3) array (or a single 3-vector) of points."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation


def is_rotation(R, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    ortho = np.linalg.norm(R.T @ R - np.eye(3))
    return ortho <= tol and abs(np.linalg.det(R) - 1.0) <= tol


def hat(omega) -> np.ndarray:
    """Skew-symmetric cross-product matrix: ``hat(w) @ x == cross(w, x)``."""
    w = np.asarray(omega, dtype=float).reshape(3)
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def vee(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def exp_so3(omega) -> np.ndarray:
    """Rodrigues' formula ``I + sin(th)/th W + (1 - cos(th))/th^2 W^2``."""
    w = np.asarray(omega, dtype=float).reshape(3)
    theta_sq = float(w @ w)
    W = hat(w)
    if theta_sq < SMALL_ANGLE * SMALL_ANGLE:
        a = 1.0 - theta_sq / 6.0
        b = 0.5 - theta_sq / 24.0
    else:
        theta = math.sqrt(theta_sq)
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / theta_sq
    return np.eye(3) + a * W + b * (W @ W)


def log_so3(R) -> np.ndarray:
    """Rotation vector of ``R`` with norm in ``[0, pi]``."""
    R = np.asarray(R, dtype=float)
    cos_theta = min(1.0, max(-1.0, (np.trace(R) - 1.0) / 2.0))
    skew = vee(R - R.T) / 2.0  # = sin(theta) * axis
    sin_theta = float(np.linalg.norm(skew))
    # atan2 stays well conditioned at both ends, unlike acos.
    theta = math.atan2(sin_theta, cos_theta)

    if theta < SMALL_ANGLE:
        return skew * (1.0 + theta * theta / 6.0)
    if math.pi - theta > NEAR_PI:
        return skew * (theta / sin_theta)

    # theta ~ pi: the symmetric part is cos(theta) I + (1 - cos(theta)) a a^T;
    # take the column of a a^T with the largest diagonal.
    B = ((R + R.T) / 2.0 - cos_theta * np.eye(3)) / (1.0 - cos_theta)
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / math.sqrt(max(B[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    # Fix the sign from the (tiny) skew part when it is informative.
    if axis @ skew < 0.0:
        axis = -axis
    return axis * theta


def to_transform(xi: Se3Params) -> RigidTransform:
    """Rotation from ``exp_so3(omega)`` paired with the raw translation ``v``."""
    return RigidTransform(exp_so3(xi.omega), xi.v)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``a`` after ``b``: points map ``p -> a(b(p))``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(T: RigidTransform) -> RigidTransform:
    Rt = T.rotation.T
    return RigidTransform(Rt, -Rt @ T.translation)


def transform_from_xi(v, omega) -> RigidTransform:
    return to_transform(Se3Params(v, omega))


def transform_to_xi(T: RigidTransform) -> Se3Params:
    """Inverse of ``to_transform``: ``(t, log(R))``."""
    return Se3Params(T.translation, log_so3(T.rotation))
