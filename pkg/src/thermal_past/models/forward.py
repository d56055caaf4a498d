"""Single-sample forward passes returning heatmaps and simplex vectors, plus batched predictors."""

from __future__ import annotations

import numpy as np
import torch

from ..errors import ParameterError
from ..pose import GRID_H, GRID_W, IMAGE_H, IMAGE_W, J, HeatmapGrid, ThermalFrame
from . import encoding

_SHAPES = ((IMAGE_H, IMAGE_W), (GRID_H, GRID_W))
CHUNK = 64


def _image_tensor(image, channels: int) -> torch.Tensor:
    v = image.values if isinstance(image, ThermalFrame) else np.asarray(image, dtype=np.float32)
    v = np.asarray(v, dtype=np.float32)
    if v.ndim == 2:
        v = v[None]
    if v.ndim != 3 or v.shape[0] != channels or v.shape[1:] not in _SHAPES:
        raise ParameterError(f"image must be ({channels}, 288, 384) or ({channels}, 72, 96), got {v.shape}")
    return torch.from_numpy(np.ascontiguousarray(v))


def _heat_tensor(h: HeatmapGrid, channels: int, shape) -> torch.Tensor:
    if not isinstance(h, HeatmapGrid):
        raise ParameterError("heatmap inputs must be HeatmapGrid instances")
    if h.channels != channels or h.shape != tuple(shape):
        raise ParameterError(f"heatmap must have {channels} channels of {shape}, got {h.shape}")
    return torch.from_numpy(h.values.astype(np.float32))


def _stack(model, image, heatmaps) -> torch.Tensor:
    img = _image_tensor(image, model.cfg.image_channels)
    parts = [img] + [_heat_tensor(h, c, tuple(img.shape[1:])) for h, c in heatmaps]
    return torch.cat(parts, dim=0)[None]


def _run(model, x):
    model.eval()
    with torch.no_grad():
        return model(x)


def goal_forward(model, image, h_p: HeatmapGrid) -> HeatmapGrid:
    """Torso-position distribution over the 72x96 grid."""
    logp = _run(model, _stack(model, image, [(h_p, J)]))[0]
    return HeatmapGrid(logp.double().exp().numpy(), normalized=True)


def type_forward(model, image, h_p: HeatmapGrid, h_r: HeatmapGrid) -> np.ndarray:
    """Pose-type probabilities, length k."""
    logp = _run(model, _stack(model, image, [(h_p, J), (h_r, 1)]))[0]
    return logp.double().exp().numpy()


def pose_forward(model, image, h_p: HeatmapGrid, h_r: HeatmapGrid, h_center: HeatmapGrid) -> HeatmapGrid:
    """14 per-joint distributions (torso excluded) over the 72x96 grid."""
    logp = _run(model, _stack(model, image, [(h_p, J), (h_r, 1), (h_center, J)]))[0]
    return HeatmapGrid(logp.double().exp().numpy(), normalized=True)


# ---------------------------------------------------------------- batched predictors
# Inputs: pooled images (B, 72, 96) and pixel coordinates; outputs are float64 log-probs.


def _batched(model, build, n: int) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for s in range(0, n, CHUNK):
            out.append(model(build(slice(s, s + CHUNK))).double().numpy())
    return np.concatenate(out) if out else np.zeros((0,))


def predict_goal(model, images, current) -> np.ndarray:
    """(B, 6912) log-probs over cells."""
    images, current = np.asarray(images), np.asarray(current)
    logp = _batched(model, lambda s: encoding.goal_inputs(images[s], current[s]), len(images))
    return logp.reshape(len(images), -1)


def predict_type(model, images, current, r) -> np.ndarray:
    images, current, r = np.asarray(images), np.asarray(current), np.asarray(r)
    return _batched(model, lambda s: encoding.type_inputs(images[s], current[s], r[s]), len(images))


def predict_pose(model, images, current, r, center) -> np.ndarray:
    """(B, 14, 6912) log-probs."""
    images, current, r, center = (np.asarray(a) for a in (images, current, r, center))
    logp = _batched(model, lambda s: encoding.pose_inputs(images[s], current[s], r[s], center[s]), len(images))
    return logp.reshape(len(images), J - 1, -1)


def predict_heatmap(model, images, current) -> np.ndarray:
    """(B, 15, 6912) log-probs of the direct baseline."""
    images, current = np.asarray(images), np.asarray(current)
    logp = _batched(model, lambda s: encoding.goal_inputs(images[s], current[s]), len(images))
    return logp.reshape(len(images), J, -1)


def predict_semantic(model, images, poses) -> np.ndarray:
    """Plausibility probabilities in [0, 1]."""
    images, poses = np.asarray(images), np.asarray(poses)
    logits = _batched(model, lambda s: encoding.semantic_inputs(images[s], poses[s]), len(images))
    return 1.0 / (1.0 + np.exp(-logits))
