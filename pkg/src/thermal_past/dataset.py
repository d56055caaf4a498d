"""Clip ingestion, supervised (current, 3 s ago) pairs, splits and pose-extraction helpers.

On-disk layout::

    root/clips/<clip_id>/thermal/%06d.png   16-bit grayscale, 288x384
    root/clips/<clip_id>/poses.json         {"frames": [{"joints": [[x, y] x15], "valid": [bool x15]}]}
    root/clips/<clip_id>/meta.json          {"fps", "actor", "room", "intensity_range": [lo, hi], "annotations": [...]}
    root/splits.json                        split manifest
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from .errors import ClipFormatError, DegenerateInputError, ParameterError
from .pose import GRID_H, GRID_STRIDE, GRID_W, IMAGE_H, IMAGE_W, TORSO, J, Pose2D, ThermalFrame
from .vocabulary import PoseTypeVocabulary, assign_types

logger = logging.getLogger(__name__)

FPS = 15
PAST_SECONDS = 3.0
MIN_DISPLACEMENT = 45.0
_FRAME_NAME = re.compile(r"^(\d{6})\.png$")


@dataclass
class Annotation:
    action: str
    object: str
    start: int
    end: int

    def to_json(self) -> dict:
        return {"action": self.action, "object": self.object, "start": self.start, "end": self.end}


@dataclass
class ClipRecord:
    clip_id: str
    fps: int
    frames: list[ThermalFrame]
    poses: list[Pose2D]
    annotations: list[Annotation] = field(default_factory=list)
    source: str = "real"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.frames) != len(self.poses):
            raise ClipFormatError(
                f"clip {self.clip_id}: {len(self.frames)} frames but {len(self.poses)} poses",
                frame=min(len(self.frames), len(self.poses)),
            )
        ts = np.array([f.timestamp for f in self.frames])
        if len(ts) > 1 and not np.allclose(np.diff(ts), 1.0 / self.fps):
            raise ClipFormatError(f"clip {self.clip_id}: timestamps not spaced at 1/fps")

    def __len__(self):
        return len(self.poses)

    def joints(self) -> np.ndarray:
        return np.stack([p.joints for p in self.poses])


@dataclass
class SamplePair:
    """One supervised instance: frame and pose at ``t``, pose at ``t - offset``."""

    image: ThermalFrame
    current_pose: Pose2D
    past_pose: Pose2D
    clip_id: str
    frame_index: int
    past_type: int | None = None
    offset: int = 45

    def __post_init__(self):
        if self.frame_index < self.offset:
            raise ParameterError(f"frame index {self.frame_index} precedes the {self.offset}-frame offset")
        if not (self.current_pose.valid.all() and self.past_pose.valid.all()):
            raise ParameterError("sample poses must have every joint valid")

    @property
    def past_torso(self) -> np.ndarray:
        return self.past_pose.torso


@dataclass
class SplitManifest:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int
    ratios: tuple[float, float, float]

    def to_json(self) -> dict:
        return {"train": self.train, "val": self.val, "test": self.test, "seed": self.seed, "ratios": list(self.ratios)}

    @classmethod
    def from_json(cls, obj: dict) -> "SplitManifest":
        return cls(list(obj["train"]), list(obj["val"]), list(obj["test"]), obj["seed"], tuple(obj["ratios"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- clip I/O


def _read_json(path: Path, what: str):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as e:
        raise ClipFormatError(f"missing {what}: {path}") from e
    except json.JSONDecodeError as e:
        raise ClipFormatError(f"malformed {what} {path}: {e}") from e


def load_clip(path) -> ClipRecord:
    """Read one clip directory; 16-bit counts are rescaled by the meta intensity range."""
    path = Path(path)
    meta = _read_json(path / "meta.json", "meta.json")
    pose_doc = _read_json(path / "poses.json", "poses.json")
    fps = int(meta.get("fps", FPS))
    lo, hi = meta.get("intensity_range", [0, 65535])
    if not hi > lo:
        raise ClipFormatError(f"bad intensity range {lo}..{hi}")

    names = sorted(p.name for p in (path / "thermal").glob("*.png")) if (path / "thermal").is_dir() else []
    indices = []
    for name in names:
        m = _FRAME_NAME.match(name)
        if m is None:
            raise ClipFormatError(f"unexpected file thermal/{name}")
        indices.append(int(m.group(1)))
    for expect, got in enumerate(indices):
        if got != expect:
            raise ClipFormatError(f"thermal frame indices not contiguous: expected {expect:06d}, found {got:06d}", frame=expect)

    try:
        pose_frames = pose_doc["frames"]
        poses = []
        for i, fr in enumerate(pose_frames):
            poses.append(Pose2D.from_array(fr["joints"], fr.get("valid"), clamp=True))
    except (KeyError, TypeError, ParameterError) as e:
        raise ClipFormatError(f"malformed pose entry in {path / 'poses.json'}: {e}", frame=len(poses)) from e

    if len(poses) < len(indices):
        raise ClipFormatError(f"no pose for frame {len(poses)}", frame=len(poses))
    if len(indices) < len(poses):
        raise ClipFormatError(f"missing thermal frame {len(indices):06d}.png", frame=len(indices))

    frames = []
    for i in indices:
        raw = cv2.imread(str(path / "thermal" / f"{i:06d}.png"), cv2.IMREAD_UNCHANGED)
        if raw is None or raw.shape != (IMAGE_H, IMAGE_W):
            raise ClipFormatError(f"unreadable or mis-sized frame {i:06d}.png", frame=i)
        v = np.clip((raw.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0).astype(np.float32)
        frames.append(ThermalFrame(v, timestamp=i / fps))

    annotations = [Annotation(**a) for a in meta.get("annotations", [])]
    return ClipRecord(
        clip_id=meta.get("clip_id", path.name),
        fps=fps,
        frames=frames,
        poses=poses,
        annotations=annotations,
        source=meta.get("source", "real"),
        meta=meta,
    )


def write_clip(clip: ClipRecord, root) -> Path:
    """Write a clip under ``root/clips/<clip_id>`` in the layout ``load_clip`` reads."""
    out = Path(root) / "clips" / clip.clip_id
    (out / "thermal").mkdir(parents=True, exist_ok=True)
    lo, hi = clip.meta.get("intensity_range", [0, 65535])
    for i, frame in enumerate(clip.frames):
        counts = np.rint(lo + frame.values.astype(np.float64) * (hi - lo)).astype(np.uint16)
        cv2.imwrite(str(out / "thermal" / f"{i:06d}.png"), counts)
    (out / "poses.json").write_text(json.dumps({"frames": [p.to_json() for p in clip.poses]}))
    meta = dict(clip.meta)
    meta.update(
        clip_id=clip.clip_id,
        fps=clip.fps,
        intensity_range=[lo, hi],
        source=clip.source,
        annotations=[a.to_json() for a in clip.annotations],
    )
    (out / "meta.json").write_text(json.dumps(meta, indent=1))
    return out


def list_clips(root) -> list[str]:
    return sorted(p.name for p in (Path(root) / "clips").iterdir() if p.is_dir())


# ---------------------------------------------------------------- pairing


def _offset_frames(fps: int, seconds: float = PAST_SECONDS) -> int:
    return int(round(seconds * fps))


def _moving_frames(joints: np.ndarray, valid: np.ndarray, w: int, threshold: float) -> np.ndarray:
    if len(joints) <= w:
        return np.zeros(0, dtype=np.int64)
    disp = np.linalg.norm(joints[w:] - joints[:-w], axis=2)
    both = valid[w:] & valid[:-w]
    counts = both.sum(axis=1)
    mean = np.where(counts > 0, (disp * both).sum(axis=1) / np.maximum(counts, 1), 0.0)
    return np.flatnonzero((mean >= threshold) & (counts > 0)) + w


def motion_filter(clip: ClipRecord, window_s: float = PAST_SECONDS, threshold: float = MIN_DISPLACEMENT) -> list[int]:
    """Frames ``t`` whose mean per-joint displacement since ``t - window`` reaches ``threshold`` px."""
    w = _offset_frames(clip.fps, window_s)
    if len(clip) <= w:
        return []
    valid = np.stack([p.valid for p in clip.poses])
    return [int(t) for t in _moving_frames(clip.joints(), valid, w, threshold)]


def pair_indices(
    poses: Sequence[Pose2D], fps: int = FPS, offset: int | None = None, stride: int = 1,
    min_displacement: float | None = MIN_DISPLACEMENT,
) -> list[int]:
    """Frame indices ``t`` that :func:`make_pairs` keeps, computed from poses alone."""
    if offset is None:
        offset = _offset_frames(fps)
    if stride < 1:
        raise ParameterError("stride must be >= 1")
    if len(poses) <= offset:
        return []
    joints = np.stack([p.joints for p in poses])
    valid = np.stack([p.valid for p in poses])
    candidates = np.arange(offset, len(poses), stride)
    if min_displacement is not None:
        moving = _moving_frames(joints, valid, offset, min_displacement)
        candidates = candidates[np.isin(candidates, moving)]
    ok = valid[candidates].all(axis=1) & valid[candidates - offset].all(axis=1)
    return [int(t) for t in candidates[ok]]


def make_pairs(
    clip: ClipRecord,
    offset: int | None = None,
    stride: int = 1,
    min_displacement: float | None = MIN_DISPLACEMENT,
) -> list[SamplePair]:
    """Pairs at ``t`` in ``range(offset, len, stride)`` that pass the motion rule.

    ``min_displacement=None`` disables the motion rule. Pairs whose poses have
    invalid joints are skipped.
    """
    if offset is None:
        offset = _offset_frames(clip.fps)
    idx = pair_indices(clip.poses, clip.fps, offset, stride, min_displacement)
    return [
        SamplePair(clip.frames[t], clip.poses[t], clip.poses[t - offset], clip.clip_id, t, offset=offset) for t in idx
    ]


def split_by_clip(clip_ids: Sequence[str], ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitManifest:
    ids = list(clip_ids)
    if len(ids) < 3:
        raise ParameterError("need at least 3 clips to split")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ParameterError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    if len(set(ids)) != len(ids):
        raise ParameterError("clip ids must be unique")
    order = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    n = len(ids)
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    if ratios[1] > 0:
        n_val = max(n_val, 1)
    if ratios[2] > 0:
        n_train = min(n_train, n - n_val - 1)
    n_train = max(n_train, 1)
    return SplitManifest(
        order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :], seed, tuple(float(r) for r in ratios)
    )


# ---------------------------------------------------------------- compact pair storage


def pool_image(values) -> np.ndarray:
    """Average-pool a 288x384 image to the 72x96 grid (pooled input passes through)."""
    v = np.asarray(values.values if isinstance(values, ThermalFrame) else values, dtype=np.float32)
    if v.shape == (GRID_H, GRID_W):
        return v
    if v.shape != (IMAGE_H, IMAGE_W):
        raise ParameterError(f"image must be {IMAGE_H}x{IMAGE_W} or {GRID_H}x{GRID_W}, got {v.shape}")
    s = GRID_STRIDE
    return v.reshape(GRID_H, s, GRID_W, s).mean(axis=(1, 3), dtype=np.float32)


@dataclass
class PairRow:
    image: np.ndarray  # pooled 72x96
    current_pose: Pose2D
    past_pose: Pose2D
    past_type: int | None
    clip_id: str
    frame_index: int


@dataclass
class PairTable:
    """Column storage of sample pairs with images pooled to the 72x96 grid.

    Training and evaluation read from this table so that full-resolution frames
    never need to be held for a whole split.
    """

    images: np.ndarray  # (N, 72, 96) float32
    current: np.ndarray  # (N, 15, 2)
    past: np.ndarray  # (N, 15, 2)
    past_type: np.ndarray  # (N,) int64, -1 when unset
    clip_ids: list[str]
    frame_index: np.ndarray

    @classmethod
    def empty(cls) -> "PairTable":
        return cls(
            np.zeros((0, GRID_H, GRID_W), np.float32), np.zeros((0, J, 2)), np.zeros((0, J, 2)),
            np.zeros(0, np.int64), [], np.zeros(0, np.int64),
        )

    @classmethod
    def from_pairs(cls, pairs: Sequence[SamplePair]) -> "PairTable":
        if not pairs:
            return cls.empty()
        return cls(
            np.stack([pool_image(p.image) for p in pairs]),
            np.stack([p.current_pose.joints for p in pairs]),
            np.stack([p.past_pose.joints for p in pairs]),
            np.array([-1 if p.past_type is None else p.past_type for p in pairs], dtype=np.int64),
            [p.clip_id for p in pairs],
            np.array([p.frame_index for p in pairs], dtype=np.int64),
        )

    @classmethod
    def concat(cls, tables: Sequence["PairTable"]) -> "PairTable":
        tables = [t for t in tables if len(t)]
        if not tables:
            return cls.empty()
        return cls(
            np.concatenate([t.images for t in tables]),
            np.concatenate([t.current for t in tables]),
            np.concatenate([t.past for t in tables]),
            np.concatenate([t.past_type for t in tables]),
            [c for t in tables for c in t.clip_ids],
            np.concatenate([t.frame_index for t in tables]),
        )

    def __len__(self):
        return len(self.current)

    def subset(self, idx) -> "PairTable":
        idx = np.asarray(idx, dtype=np.int64)
        return PairTable(
            self.images[idx], self.current[idx], self.past[idx], self.past_type[idx],
            [self.clip_ids[i] for i in idx], self.frame_index[idx],
        )

    def row(self, i: int) -> PairRow:
        z = int(self.past_type[i])
        return PairRow(
            self.images[i], Pose2D(self.current[i]), Pose2D(self.past[i]),
            None if z < 0 else z, self.clip_ids[i], int(self.frame_index[i]),
        )

    @property
    def past_torso(self) -> np.ndarray:
        return self.past[:, TORSO]

    def with_types(self, vocab: PoseTypeVocabulary) -> "PairTable":
        vec = (np.delete(self.past, TORSO, axis=1) - self.past[:, TORSO : TORSO + 1]).reshape(len(self), -1)
        types = assign_types(vec, vocab) if len(self) else np.zeros(0, np.int64)
        return PairTable(self.images, self.current, self.past, types.astype(np.int64), self.clip_ids, self.frame_index)

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.images, self.current, self.past, self.past_type, self.frame_index):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update("\n".join(self.clip_ids).encode())
        return h.hexdigest()[:16]

    def save(self, path) -> None:
        np.savez_compressed(
            path, images=self.images, current=self.current, past=self.past, past_type=self.past_type,
            clip_ids=np.array(self.clip_ids), frame_index=self.frame_index,
        )

    @classmethod
    def load(cls, path) -> "PairTable":
        d = np.load(path)
        return cls(d["images"], d["current"], d["past"], d["past_type"], [str(c) for c in d["clip_ids"]], d["frame_index"])


# ---------------------------------------------------------------- 3D helpers


@dataclass
class Extrinsics:
    """Camera-to-world transforms ``X_world = R @ X_cam + t`` for both cameras."""

    R1: np.ndarray = field(default_factory=lambda: np.eye(3))
    t1: np.ndarray = field(default_factory=lambda: np.zeros(3))
    R2: np.ndarray = field(default_factory=lambda: np.eye(3))
    t2: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int = IMAGE_W
    height: int = IMAGE_H


def _valid_rows(x: np.ndarray, valid) -> np.ndarray:
    return np.all(np.isfinite(x), axis=1) if valid is None else np.asarray(valid, bool) & np.all(np.isfinite(x), axis=1)


def triangulate_scales(
    p_cam1,
    q_cam2,
    extrinsics: Extrinsics | None = None,
    valid=None,
    pivot: str = "world",
) -> tuple[float, float]:
    """Least-squares depth scales aligning two monocular 3D poses.

    Camera 1 is the metric reference (``a = 1``). With world-frame joint sets
    ``P`` and ``Q``, the default ``pivot="world"`` returns
    ``b = <P, Q> / <Q, Q>`` (scaling ``Q`` about the world origin).
    ``pivot="camera"`` scales ``Q`` about camera 2's optical centre instead.
    """
    ext = extrinsics or Extrinsics()
    p = np.asarray(p_cam1, dtype=np.float64)
    q = np.asarray(q_cam2, dtype=np.float64)
    mask = _valid_rows(p, valid) & _valid_rows(q, valid)
    if mask.sum() < 3:
        raise DegenerateInputError("need at least 3 joints valid in both poses")
    P = p[mask] @ np.asarray(ext.R1).T + np.asarray(ext.t1)
    Q = q[mask] @ np.asarray(ext.R2).T + np.asarray(ext.t2)
    if pivot == "world":
        origin = np.zeros(3)
    elif pivot == "camera":
        origin = np.asarray(ext.t2, dtype=np.float64)
    else:
        raise ParameterError(f"unknown pivot {pivot!r}")
    Pc, Qc = P - origin, Q - origin
    qq = float(np.sum(Qc * Qc))
    if qq == 0.0:
        raise DegenerateInputError("second pose has zero norm about the pivot")
    return 1.0, float(np.sum(Pc * Qc)) / qq


def project_to_image(pose3d, intrinsics: Intrinsics, valid=None) -> Pose2D:
    """Pinhole projection rescaled to the 288x384 model image.

    Joints with non-positive depth come back invalid (coordinates zeroed).
    """
    X = np.asarray(pose3d, dtype=np.float64)
    if X.shape != (J, 3):
        raise ParameterError(f"expected ({J}, 3) joints, got {X.shape}")
    z = X[:, 2]
    ok = z > 0 if valid is None else (z > 0) & np.asarray(valid, bool)
    safe_z = np.where(ok, z, 1.0)
    u = intrinsics.fx * X[:, 0] / safe_z + intrinsics.cx
    v = intrinsics.fy * X[:, 1] / safe_z + intrinsics.cy
    xy = np.stack([u * IMAGE_W / intrinsics.width, v * IMAGE_H / intrinsics.height], axis=1)
    xy[~ok] = 0.0
    return Pose2D.from_array(xy, ok, clamp=True)
