"""Sparse depth maps and the input preprocessing (normalisation, max-pooling).

``NO_DATA`` is 0.0: a LiDAR return can never have zero depth, so a zero cell
means "no measurement". On disk, maps are 16-bit grayscale PNGs holding
depth in millimeters with the same 0 = no-data convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NO_DATA = 0.0

# Largest depth a 16-bit millimeter PNG can carry.
PNG_MAX_DEPTH = 65.535


@dataclass(frozen=True, eq=False)
class SparseDepthMap:
    """H x W grid of metric depth; cells equal to ``NO_DATA`` are empty."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim != 2:
            raise ValueError(f"depth map must be 2-D, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise ValueError("depth values must be finite and non-negative")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def empty(cls, height: int, width: int) -> "SparseDepthMap":
        return cls(np.zeros((height, width)))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def valid(self) -> np.ndarray:
        return self.values != NO_DATA

    def valid_count(self) -> int:
        return int(np.count_nonzero(self.values))


@dataclass(frozen=True, eq=False)
class NormalizedDepthMap:
    values: np.ndarray  # in [-1, 1] where valid, 0 elsewhere
    valid: np.ndarray
    d_min: float
    d_max: float


def densify_mask(m: SparseDepthMap) -> np.ndarray:
    """Boolean occupancy grid, True where the map carries a depth."""
    return m.values != NO_DATA


def max_pool(m: SparseDepthMap, window: int = 5, stride: int = 1) -> SparseDepthMap:
    """Max-pooling with 'same' padding; empty windows stay ``NO_DATA``.

    Output size is ``ceil(H / stride) x ceil(W / stride)``. Valid depths are
    positive, so padding with ``NO_DATA`` never wins a window.
    """
    if window < 1 or stride < 1:
        raise ValueError(f"window and stride must be >= 1, got {window}, {stride}")
    h, w = m.shape
    out_h = -(-h // stride)
    out_w = -(-w // stride)
    pad_h = max((out_h - 1) * stride + window - h, 0)
    pad_w = max((out_w - 1) * stride + window - w, 0)
    padded = np.pad(
        m.values,
        ((pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2)),
        constant_values=NO_DATA,
    )
    windows = sliding_window_view(padded, (window, window))[::stride, ::stride]
    return SparseDepthMap(windows.max(axis=(2, 3))[:out_h, :out_w])


def normalize(m: SparseDepthMap) -> NormalizedDepthMap:
    """Affine map of valid depths onto [-1, 1] using the map's own min/max.

    A constant map (``d_min == d_max``) normalises to all zeros.
    """
    valid = m.valid
    if not valid.any():
        raise ValueError("cannot normalize a depth map with no valid pixels")
    d = m.values[valid]
    d_min, d_max = float(d.min()), float(d.max())
    out = np.zeros(m.shape)
    if d_max > d_min:
        out[valid] = 2.0 * (d - d_min) / (d_max - d_min) - 1.0
    return NormalizedDepthMap(out, valid.copy(), d_min, d_max)


def denormalize(n: NormalizedDepthMap) -> SparseDepthMap:
    out = np.zeros(n.values.shape)
    if n.d_max > n.d_min:
        out[n.valid] = (n.values[n.valid] + 1.0) / 2.0 * (n.d_max - n.d_min) + n.d_min
    else:
        out[n.valid] = n.d_min
    return SparseDepthMap(out)


def to_millimeters(m: SparseDepthMap) -> np.ndarray:
    if m.values.max(initial=0.0) > PNG_MAX_DEPTH:
        raise ValueError(
            f"depth {m.values.max():.3f} m exceeds the 16-bit PNG limit of {PNG_MAX_DEPTH} m"
        )
    mm = np.rint(m.values * 1000.0).astype(np.uint16)
    # A valid depth below 0.5 mm would round to the no-data value.
    mm[(mm == 0) & m.valid] = 1
    return mm


def write_depth_png(path, m: SparseDepthMap) -> None:
    from PIL import Image

    Image.fromarray(to_millimeters(m)).save(Path(path), format="PNG")


def read_depth_png(path) -> SparseDepthMap:
    from PIL import Image

    with Image.open(Path(path)) as img:
        if img.mode not in ("I;16", "I;16B", "I;16L", "I", "L"):
            raise ValueError(f"{path}: expected a 16-bit grayscale depth PNG, got mode {img.mode}")
        mm = np.array(img, dtype=np.int64)
    if mm.ndim != 2:
        raise ValueError(f"{path}: depth PNG must be single-channel")
    return SparseDepthMap(mm.astype(float) / 1000.0)
