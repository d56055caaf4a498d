"""Static PNG output: ranked hypothesis overlays and intensity-sweep curves."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .pose import BONES, Pose2D  # noqa: E402


def _skeleton(ax, joints: np.ndarray, color: str, lw: float = 1.2, ls: str = "-") -> None:
    for a, b in BONES:
        ax.plot(joints[[a, b], 0], joints[[a, b], 1], color=color, lw=lw, ls=ls)


def hypothesis_score(h) -> float:
    return float(h.logp_r + h.logp_z + np.sum(h.logp_joints))


def overlay_hypotheses(image: np.ndarray, current: Pose2D, result, path, truth: Pose2D | None = None, cols: int = 6) -> Path:
    """One panel per hypothesis, ranked by joint log-probability.

    Each panel shows the thermal frame, the current pose (cyan), the sampled
    past pose (orange) and, when known, the true past pose (dashed white).
    """
    hyps = sorted(result.hypotheses, key=hypothesis_score, reverse=True)
    rows = math.ceil(len(hyps) / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(2.4 * cols, 1.9 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    lo, hi = float(np.min(image)), float(np.max(image))
    for rank, (h, ax) in enumerate(zip(hyps, axes.ravel()), start=1):
        ax.imshow(image, cmap="inferno", vmin=lo, vmax=hi)
        _skeleton(ax, current.joints, "cyan", 0.8)
        if truth is not None:
            _skeleton(ax, truth.joints, "white", 0.8, "--")
        _skeleton(ax, h.pose.joints, "orange")
        ax.set_title(f"#{rank} z={h.z} {hypothesis_score(h):.1f}", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return Path(path)


def plot_sweep(rows, path, title: str = "") -> Path:
    """Expected goal-to-mark distance against mark scale."""
    scales = [s for s, _ in rows]
    dists = [d for _, d in rows]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(scales, dists, "o-")
    ax.set_xlabel("mark intensity scale")
    ax.set_ylabel("expected goal-to-mark distance (px)")
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
