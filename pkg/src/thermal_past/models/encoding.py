"""Batched torch construction of network inputs on the 72x96 grid."""

from __future__ import annotations

import numpy as np
import torch

from ..pose import DEFAULT_SIGMA, GRID_H, GRID_W, GRID_STRIDE

GRID_SIGMA = DEFAULT_SIGMA[(GRID_H, GRID_W)]


def _axis(g: torch.Tensor, n: int, sigma: float) -> torch.Tensor:
    grid = torch.arange(n, dtype=g.dtype)
    logw = -((grid - g.clamp(0, n - 1)[..., None]) ** 2) / (2.0 * sigma * sigma)
    return torch.softmax(logw, dim=-1)


def render_points(points, sigma: float = GRID_SIGMA) -> torch.Tensor:
    """Normalised Gaussians for pixel points (..., L, 2) -> (..., L, 72, 96).

    Same construction as ``pose.render_heatmap`` on the 72x96 grid, vectorised
    over a batch.
    """
    pts = torch.as_tensor(np.asarray(points, dtype=np.float32))
    g = (pts - GRID_STRIDE // 2) / GRID_STRIDE
    wx = _axis(g[..., 0], GRID_W, sigma)
    wy = _axis(g[..., 1], GRID_H, sigma)
    return wy[..., :, None] * wx[..., None, :]


def _image_channels(images) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images, dtype=np.float32))
    return x[:, None] if x.dim() == 3 else x


def goal_inputs(images, current) -> torch.Tensor:
    return torch.cat([_image_channels(images), render_points(current)], dim=1)


def type_inputs(images, current, r) -> torch.Tensor:
    r = np.asarray(r, dtype=np.float32).reshape(-1, 1, 2)
    return torch.cat([goal_inputs(images, current), render_points(r)], dim=1)


def pose_inputs(images, current, r, center) -> torch.Tensor:
    return torch.cat([type_inputs(images, current, r), render_points(center)], dim=1)


def semantic_inputs(images, pose) -> torch.Tensor:
    return goal_inputs(images, pose)
