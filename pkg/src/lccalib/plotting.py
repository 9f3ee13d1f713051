"""Figures for the report path: error histograms and LiDAR-on-image overlays.

Everything renders off-screen with the Agg backend and writes PNG files with
the software/version metadata stripped, so reruns produce identical bytes.
"""

from __future__ import annotations

from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .camera import CameraIntrinsics, PointCloud, project_points  # noqa: E402
from .depthmap import SparseDepthMap  # noqa: E402

PNG_METADATA = {"Software": None}
DPI = 100


def _save(fig, path) -> None:
    fig.savefig(path, dpi=DPI, metadata=PNG_METADATA)
    plt.close(fig)


def plot_histogram(hist: dict, path, xlabel: str, title: str = "") -> None:
    """Bar chart of a summary histogram (``{"edges": [...], "counts": [...]}``).

    Bins are drawn with equal width and labelled by their edges, since the
    last edge is usually an open-ended catch-all.
    """
    edges = hist["edges"]
    counts = hist["counts"]
    labels = [f"{lo:g}-{hi:g}" if hi < 1e6 else f">{lo:g}" for lo, hi in zip(edges[:-1], edges[1:])]
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    ax.bar(np.arange(len(counts)), counts, color="0.35", width=0.8)
    ax.set_xticks(np.arange(len(counts)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("samples")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def plot_summary_histograms(summary: dict, rot_path, trans_path) -> None:
    plot_histogram(summary["histogram_geodesic_deg"], rot_path, "geodesic rotation error [deg]", "rotation error")
    tr = dict(summary["histogram_translation_m"])
    # Centimeters read better on the axis than meters.
    tr["edges"] = [e * 100 if e < 1e6 else e for e in tr["edges"]]
    plot_histogram(tr, trans_path, "translation error [cm]", "translation error")


def plot_overlay(
    cloud: PointCloud,
    K: CameraIntrinsics,
    path,
    image: Optional[np.ndarray] = None,
    background: Optional[SparseDepthMap] = None,
    max_depth: float = 40.0,
    title: str = "",
) -> int:
    """Draw camera-frame points over an RGB image or a depth map.

    Points are coloured by depth. Without an image the background is the
    target depth map in gray (or black). Returns the number of points drawn.
    """
    uv, z, ok = project_points(cloud.points, K)
    fig = plt.figure(figsize=(K.width / DPI, K.height / DPI))
    ax = fig.add_axes([0, 0, 1, 1])
    if image is not None:
        ax.imshow(image, extent=(0, K.width, K.height, 0), interpolation="nearest")
    elif background is not None:
        bg = np.where(background.valid, 1.0 - np.clip(background.values / max_depth, 0, 1), 0.0)
        ax.imshow(bg, cmap="gray", vmin=0, vmax=1, extent=(0, K.width, K.height, 0), interpolation="nearest")
    else:
        ax.imshow(np.zeros(K.shape), cmap="gray", vmin=0, vmax=1, extent=(0, K.width, K.height, 0))
    ax.scatter(uv[ok, 0], uv[ok, 1], c=z[ok], cmap="jet", vmin=0, vmax=max_depth, s=1.5, linewidths=0)
    if title:
        ax.text(4, 12, title, color="white", fontsize=8)
    ax.set_xlim(0, K.width)
    ax.set_ylim(K.height, 0)
    ax.axis("off")
    _save(fig, path)
    return int(np.count_nonzero(ok))
