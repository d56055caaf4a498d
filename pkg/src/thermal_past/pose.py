"""Skeleton conventions, heatmap codec, pose algebra and the MPJPE metric.

Coordinates are ``(x, y)`` pixels in the 288x384 model image. Heatmap grids
come in two sizes, the full input grid (288x384, stride 1) and the output grid
(72x96, stride 4). Grid cell ``(row, col)`` of a stride-``s`` grid maps to the
pixel ``(col * s + s // 2, row * s + s // 2)``; the inverse mapping used when
rendering is ``g = (x - s // 2) / s``, so rendering then decoding a point that
sits on a cell centre is exact.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateInputError, ParameterError

IMAGE_H, IMAGE_W = 288, 384
GRID_H, GRID_W = 72, 96
GRID_STRIDE = 4
GRID_CELLS = GRID_H * GRID_W
SUPPORTED_GRIDS = ((IMAGE_H, IMAGE_W), (GRID_H, GRID_W))
# sigma is expressed in cells of the grid being rendered
DEFAULT_SIGMA = {(IMAGE_H, IMAGE_W): 8.0, (GRID_H, GRID_W): 2.0}

JOINT_NAMES = (
    "nose", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "mid_hip",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
)
BONES = (
    (0, 1), (1, 2), (2, 3), (3, 4), (1, 5), (5, 6), (6, 7), (1, 8),
    (8, 9), (9, 10), (10, 11), (8, 12), (12, 13), (13, 14),
)


@dataclass(frozen=True)
class Skeleton:
    """First 15 joints of the 25-joint body layout, rooted at the mid hip."""

    joint_count: int = 15
    torso_index: int = 8
    joint_names: tuple[str, ...] = JOINT_NAMES
    flip_pairs: tuple[tuple[int, int], ...] = ((2, 5), (3, 6), (4, 7), (9, 12), (10, 13), (11, 14))

    def __post_init__(self):
        if self.joint_count != 15 or len(self.joint_names) != 15:
            raise ParameterError("skeleton must have exactly 15 joints")
        if not 0 <= self.torso_index < self.joint_count:
            raise ParameterError("torso index out of range")
        flat = [j for pair in self.flip_pairs for j in pair]
        if len(set(flat)) != len(flat) or self.torso_index in flat:
            raise ParameterError("flip pairs must be disjoint and exclude the torso")

    @property
    def non_torso(self) -> np.ndarray:
        return np.array([j for j in range(self.joint_count) if j != self.torso_index])

    @property
    def flip_permutation(self) -> np.ndarray:
        perm = np.arange(self.joint_count)
        for a, b in self.flip_pairs:
            perm[a], perm[b] = b, a
        return perm


SKELETON = Skeleton()
J = SKELETON.joint_count
TORSO = SKELETON.torso_index
NON_TORSO = SKELETON.non_torso


class Pose2D:
    """A 15-joint 2D pose. ``joints`` is ``(15, 2)`` float64, ``valid`` is ``(15,)`` bool.

    The constructor only checks shapes and finiteness. Poses coming from the
    outside world (files, projections, templates) are clamped into the frame via
    :meth:`from_array` or :meth:`clamped`; the pose algebra itself never clamps,
    so compose/split round-trips stay exact.
    """

    __slots__ = ("joints", "valid")

    def __init__(self, joints, valid=None):
        joints = np.array(joints, dtype=np.float64)
        if joints.shape != (J, 2):
            raise ParameterError(f"expected ({J}, 2) joints, got {joints.shape}")
        if not np.all(np.isfinite(joints)):
            raise ParameterError("pose coordinates must be finite")
        if valid is None:
            valid = np.ones(J, dtype=bool)
        valid = np.array(valid, dtype=bool)
        if valid.shape != (J,):
            raise ParameterError(f"expected ({J},) validity mask, got {valid.shape}")
        joints.setflags(write=False)
        valid.setflags(write=False)
        self.joints = joints
        self.valid = valid

    @classmethod
    def from_array(cls, joints, valid=None, clamp: bool = True) -> "Pose2D":
        pose = cls(joints, valid)
        return pose.clamped() if clamp else pose

    def clamped(self, width: int = IMAGE_W, height: int = IMAGE_H) -> "Pose2D":
        j = self.joints.copy()
        j[:, 0] = np.clip(j[:, 0], 0.0, width - 1)
        j[:, 1] = np.clip(j[:, 1], 0.0, height - 1)
        j[~self.valid] = self.joints[~self.valid]
        return Pose2D(j, self.valid)

    @property
    def torso(self) -> np.ndarray:
        return self.joints[TORSO].copy()

    def translated(self, offset) -> "Pose2D":
        return Pose2D(self.joints + np.asarray(offset, dtype=np.float64), self.valid)

    def mirrored(self, width: float = IMAGE_W) -> "Pose2D":
        """Horizontal flip ``x -> width - x`` with left/right joints swapped."""
        perm = SKELETON.flip_permutation
        j = self.joints[perm].copy()
        j[:, 0] = width - j[:, 0]
        return Pose2D(j, self.valid[perm])

    def to_json(self) -> dict:
        return {"joints": self.joints.tolist(), "valid": self.valid.tolist()}

    @classmethod
    def from_json(cls, obj: dict, clamp: bool = False) -> "Pose2D":
        return cls.from_array(obj["joints"], obj.get("valid"), clamp=clamp)

    def __eq__(self, other):
        if not isinstance(other, Pose2D):
            return NotImplemented
        return np.array_equal(self.joints, other.joints) and np.array_equal(self.valid, other.valid)

    __hash__ = None

    def __repr__(self):
        return f"Pose2D(torso={tuple(np.round(self.joints[TORSO], 2))}, valid={int(self.valid.sum())}/{J})"


@dataclass
class HeatmapGrid:
    """``values`` has shape ``(channels, height, width)``; non-negative."""

    values: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[None]
        if v.ndim != 3:
            raise ParameterError("heatmap values must be (L, h, w)")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ParameterError("heatmap values must be finite and non-negative")
        if self.normalized:
            sums = v.reshape(len(v), -1).sum(axis=1)
            if np.any(np.abs(sums - 1.0) > 1e-5):
                raise ParameterError("normalized heatmap channels must sum to 1")
        self.values = v

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    def channel(self, i: int) -> "HeatmapGrid":
        return HeatmapGrid(self.values[i : i + 1], normalized=self.normalized)


@dataclass
class ThermalFrame:
    """One thermal image, intensities normalised to ``[0, 1]``."""

    values: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.shape != (IMAGE_H, IMAGE_W):
            raise ParameterError(f"thermal frame must be {IMAGE_H}x{IMAGE_W}, got {v.shape}")
        if not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0:
            raise ParameterError("thermal intensities must lie in [0, 1]")
        self.values = v


def grid_stride(shape: Sequence[int]) -> int:
    shape = tuple(int(s) for s in shape)
    if shape not in SUPPORTED_GRIDS:
        raise ParameterError(f"unsupported grid size {shape}; expected one of {SUPPORTED_GRIDS}")
    return IMAGE_H // shape[0]


def pixel_to_grid(points, shape=(GRID_H, GRID_W)) -> np.ndarray:
    """Continuous grid coordinates ``(gx, gy)`` of pixel points."""
    s = grid_stride(shape)
    return (np.asarray(points, dtype=np.float64) - s // 2) / s


def pixel_to_cell(points, shape=(GRID_H, GRID_W)) -> np.ndarray:
    """Snap pixel points to ``(row, col)`` cells, clipping into the grid."""
    s = grid_stride(shape)
    pts = np.asarray(points, dtype=np.float64)
    col = np.clip(np.floor(pts[..., 0] / s), 0, shape[1] - 1).astype(np.int64)
    row = np.clip(np.floor(pts[..., 1] / s), 0, shape[0] - 1).astype(np.int64)
    return np.stack([row, col], axis=-1)


def cell_to_pixel(rows, cols, shape=(GRID_H, GRID_W)) -> np.ndarray:
    s = grid_stride(shape)
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    return np.stack([cols * s + s // 2, rows * s + s // 2], axis=-1).astype(np.float64)


def _axis_weights(centers: np.ndarray, n: int, sigma: float) -> np.ndarray:
    grid = np.arange(n, dtype=np.float64)
    logw = -((grid[None, :] - centers[:, None]) ** 2) / (2.0 * sigma * sigma)
    w = np.exp(logw - logw.max(axis=1, keepdims=True))
    return w / w.sum(axis=1, keepdims=True)


def render_heatmap(points, sigma: float | None = None, out_size=(GRID_H, GRID_W)) -> HeatmapGrid:
    """One normalised isotropic Gaussian channel per point.

    ``sigma`` is in cells of the target grid (default 2 on 72x96, 8 on
    288x384). Points outside the frame are drawn at the nearest in-grid
    position. The Gaussian is separable, so each channel is built as the
    outer product of two normalised 1D profiles.
    """
    h, w = (int(s) for s in out_size)
    grid_stride((h, w))
    if sigma is None:
        sigma = DEFAULT_SIGMA[(h, w)]
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(pts)):
        raise ParameterError("points must be finite")
    g = pixel_to_grid(pts, (h, w))
    gx = np.clip(g[:, 0], 0, w - 1)
    gy = np.clip(g[:, 1], 0, h - 1)
    wx = _axis_weights(gx, w, sigma)
    wy = _axis_weights(gy, h, sigma)
    values = wy[:, :, None] * wx[:, None, :]
    return HeatmapGrid(values, normalized=True)


def decode_argmax(h: HeatmapGrid) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinate of each channel's maximum cell.

    Ties go to the smallest row-major index. A flat channel (all zero or
    uniform) has no maximum; it decodes to the image centre and is flagged in
    the returned ``degenerate`` mask.
    """
    if h.channels < 1:
        raise ParameterError("heatmap has no channels")
    flat = h.values.reshape(h.channels, -1)
    idx = np.argmax(flat, axis=1)
    rows, cols = np.divmod(idx, h.width)
    coords = cell_to_pixel(rows, cols, h.shape)
    degenerate = flat.max(axis=1) == flat.min(axis=1)
    coords[degenerate] = (IMAGE_W / 2.0, IMAGE_H / 2.0)
    return coords, degenerate


def _as_rng(rng_seed) -> np.random.Generator:
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return np.random.default_rng(rng_seed)


def _channel_probs(h: HeatmapGrid, channel: int) -> np.ndarray:
    p = h.values[channel].reshape(-1)
    total = p.sum()
    if total <= 0:
        raise DegenerateInputError("cannot sample from an all-zero heatmap")
    if abs(total - 1.0) > 1e-5:
        warnings.warn("heatmap channel is not normalized; normalizing before sampling", stacklevel=3)
    return p / total


def sample_cells(h: HeatmapGrid, rng_seed=None, size: int = 1, channel: int = 0) -> np.ndarray:
    """Draw ``size`` flat cell indices from one channel (inverse-CDF sampling)."""
    p = _channel_probs(h, channel)
    cdf = np.cumsum(p)
    u = _as_rng(rng_seed).random(size) * cdf[-1]
    idx = np.searchsorted(cdf, u, side="right")
    # zero-mass cells can only be hit through rounding at the upper end
    return np.minimum(idx, np.flatnonzero(p)[-1])


def sample_from_heatmap(h: HeatmapGrid, rng_seed=None, channel: int = 0, size: int | None = None) -> np.ndarray:
    """Sample pixel coordinates (cell centres) from a heatmap channel.

    Returns a ``(2,)`` array, or ``(size, 2)`` when ``size`` is given.
    """
    n = 1 if size is None else size
    idx = sample_cells(h, rng_seed, n, channel)
    rows, cols = np.divmod(idx, h.width)
    xy = cell_to_pixel(rows, cols, h.shape)
    return xy[0] if size is None else xy


def mpjpe(pred: Pose2D, gt: Pose2D) -> float:
    """Mean per-joint Euclidean distance over the ground truth's valid joints."""
    mask = gt.valid
    if not mask.any():
        raise DegenerateInputError("ground truth has no valid joints")
    d = np.linalg.norm(pred.joints[mask] - gt.joints[mask], axis=1)
    return float(d.mean())


def topk_mpjpe(preds: Sequence[Pose2D], gt: Pose2D, k: int) -> float:
    if k <= 0:
        raise ParameterError(f"k must be positive, got {k}")
    if len(preds) < k:
        raise ParameterError(f"need at least {k} predictions, got {len(preds)}")
    errs = np.sort([mpjpe(p, gt) for p in preds])
    return float(errs[:k].mean())


def compose_pose(q_tilde, r) -> Pose2D:
    """Insert the torso position ``r`` into the 14 non-torso joints ``q_tilde``."""
    q = np.asarray(q_tilde, dtype=np.float64)
    if q.shape != (J - 1, 2):
        raise ParameterError(f"expected ({J - 1}, 2) non-torso joints, got {q.shape}")
    joints = np.empty((J, 2))
    joints[NON_TORSO] = q
    joints[TORSO] = np.asarray(r, dtype=np.float64)
    return Pose2D(joints)


def split_pose(p: Pose2D) -> tuple[np.ndarray, np.ndarray]:
    return p.joints[NON_TORSO].copy(), p.torso


def save_heatmap(path, h: HeatmapGrid) -> None:
    """Length-prefixed JSON header followed by little-endian float32 values."""
    header = json.dumps(
        {"channels": h.channels, "h": h.height, "w": h.width, "normalized": h.normalized}
    ).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(h.values.astype("<f4").tobytes())


def load_heatmap(path) -> HeatmapGrid:
    data = Path(path).read_bytes()
    (n,) = struct.unpack("<I", data[:4])
    header = json.loads(data[4 : 4 + n])
    values = np.frombuffer(data[4 + n :], dtype="<f4").reshape(header["channels"], header["h"], header["w"])
    # float32 storage can drift by ~1e-7 per channel; renormalize rather than fail the sum check
    values = values.astype(np.float64)
    if header["normalized"]:
        values = values / values.reshape(len(values), -1).sum(axis=1)[:, None, None]
    return HeatmapGrid(values, normalized=header["normalized"])


def save_poses_json(path, poses: Sequence[Pose2D]) -> None:
    Path(path).write_text(json.dumps({"frames": [p.to_json() for p in poses]}))
