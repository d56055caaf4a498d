"""Cross-entropy against hard cell and class targets."""

from __future__ import annotations

import math
import warnings

import numpy as np
import torch

from ..errors import ParameterError
from ..pose import HeatmapGrid

PROB_FLOOR = 1e-12
LOG_FLOOR = math.log(PROB_FLOOR)


def _floored_log(p: np.ndarray) -> np.ndarray:
    if np.any(p < PROB_FLOOR):
        warnings.warn(f"probabilities below {PROB_FLOOR:g} clamped before the log", RuntimeWarning, stacklevel=3)
    return np.log(np.maximum(p, PROB_FLOOR))


def ce_loss_grid(pred: HeatmapGrid | np.ndarray, target_cells) -> float:
    """Sum over channels of -log p at each channel's target ``(row, col)`` cell."""
    values = pred.values if isinstance(pred, HeatmapGrid) else np.asarray(pred, dtype=np.float64)
    if values.ndim == 2:
        values = values[None]
    cells = np.asarray(target_cells, dtype=np.int64).reshape(-1, 2)
    if len(cells) != len(values):
        raise ParameterError(f"{len(values)} channels but {len(cells)} target cells")
    h, w = values.shape[1:]
    if np.any(cells < 0) or np.any(cells[:, 0] >= h) or np.any(cells[:, 1] >= w):
        raise ParameterError("target cell outside the grid")
    p = values[np.arange(len(values)), cells[:, 0], cells[:, 1]]
    return float(-_floored_log(p).sum())


def ce_loss_class(probs, target: int) -> float:
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    if not 0 <= int(target) < len(probs):
        raise ParameterError(f"class {target} out of range [0, {len(probs)})")
    return float(-_floored_log(probs[int(target)]))


# ---------------------------------------------------------------- torch versions


def grid_nll(logp: torch.Tensor, cells: torch.Tensor) -> torch.Tensor:
    """Per-sample summed NLL for log-probs (B, C, H, W) and cells (B, C, 2)."""
    b, c, h, w = logp.shape
    flat = cells[..., 0] * w + cells[..., 1]
    picked = logp.reshape(b, c, h * w).gather(2, flat[..., None])[..., 0]
    return -picked.clamp_min(LOG_FLOOR).sum(dim=1)


def class_nll(logp: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return -logp.gather(1, target[:, None])[:, 0].clamp_min(LOG_FLOOR)
