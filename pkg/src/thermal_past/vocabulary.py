"""Pose-type vocabulary: K-means over torso-aligned pose vectors."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParameterError
from .pose import NON_TORSO, TORSO, J, Pose2D, compose_pose

VECTOR_DIM = 2 * (J - 1)


def pose_to_vector(p: Pose2D) -> np.ndarray:
    """Non-torso joints relative to the torso, flattened in skeleton order."""
    if not p.valid[TORSO]:
        raise ParameterError("torso joint must be valid")
    return (p.joints[NON_TORSO] - p.joints[TORSO]).reshape(-1)


def poses_to_vectors(poses: Sequence[Pose2D]) -> np.ndarray:
    if len(poses) == 0:
        return np.zeros((0, VECTOR_DIM))
    return np.stack([pose_to_vector(p) for p in poses])


def vector_to_pose(v, r) -> Pose2D:
    r = np.asarray(r, dtype=np.float64)
    return compose_pose(np.asarray(v, dtype=np.float64).reshape(J - 1, 2) + r, r)


@dataclass
class PoseTypeVocabulary:
    centers: np.ndarray  # (k, 28)
    member_counts: np.ndarray
    fit_seed: int = 0
    inertia: float = 0.0
    inertia_history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.centers)

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "fit_seed": self.fit_seed,
            "inertia": self.inertia,
            "centers": self.centers.reshape(self.k, J - 1, 2).tolist(),
            "member_counts": [int(c) for c in self.member_counts],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PoseTypeVocabulary":
        centers = np.asarray(obj["centers"], dtype=np.float64).reshape(obj["k"], VECTOR_DIM)
        return cls(centers, np.asarray(obj["member_counts"], dtype=np.int64), obj["fit_seed"], obj["inertia"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "PoseTypeVocabulary":
        return cls.from_json(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.centers).tobytes()).hexdigest()[:16]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, len(x) - 1)
        else:
            idx = int(rng.integers(len(x)))
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _centroids(x: np.ndarray, labels: np.ndarray, centers: np.ndarray) -> np.ndarray:
    out = centers.copy()
    for c in range(len(centers)):
        members = x[labels == c]
        if len(members):
            # shifting by the first member keeps identical members bit-exact
            out[c] = members[0] + (members - members[0]).mean(axis=0)
    return out


def _repair_empty(x: np.ndarray, labels: np.ndarray, centers: np.ndarray) -> None:
    for c in range(len(centers)):
        if np.any(labels == c):
            continue
        counts = np.bincount(labels, minlength=len(centers))
        d = ((x - centers[labels]) ** 2).sum(axis=1)
        d[counts[labels] <= 1] = -1.0
        far = int(np.argmax(d))
        centers[c] = x[far]
        labels[far] = c


def build_vocabulary(
    poses: Sequence[Pose2D] | np.ndarray,
    k: int = 200,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> PoseTypeVocabulary:
    """Lloyd's K-means with k-means++ seeding.

    Empty clusters are re-seeded with the point farthest from its current
    centre. Stops after ``max_iter`` rounds, when the assignment is stable, or
    when the relative inertia change drops below ``tol``. The inertia after
    every round is kept in ``inertia_history``.
    """
    x = np.asarray(poses, dtype=np.float64) if isinstance(poses, np.ndarray) else poses_to_vectors(poses)
    if k < 1:
        raise ParameterError("k must be positive")
    if len(x) < k:
        raise ParameterError(f"need at least k={k} poses, got {len(x)}")
    if len(np.unique(x, axis=0)) < k:
        raise ParameterError(f"fewer than k={k} distinct poses")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)
    labels = np.argmin(_sq_dists(x, centers), axis=1)
    history: list[float] = []
    for _ in range(max_iter):
        _repair_empty(x, labels, centers)
        centers = _centroids(x, labels, centers)
        d = _sq_dists(x, centers)
        new_labels = np.argmin(d, axis=1)
        inertia = float(d[np.arange(len(x)), new_labels].sum())
        history.append(inertia)
        stable = np.array_equal(new_labels, labels)
        labels = new_labels
        if stable:
            break
        if len(history) > 1 and history[-2] > 0 and (history[-2] - inertia) / history[-2] < tol:
            break
    # the last assignment may have emptied a cluster
    if len(np.unique(labels)) < k:
        _repair_empty(x, labels, centers)
        centers = _centroids(x, labels, centers)
        d = _sq_dists(x, centers)
        labels = np.argmin(d, axis=1)
        inertia = float(d[np.arange(len(x)), labels].sum())
        history.append(inertia)
    counts = np.bincount(labels, minlength=k)
    return PoseTypeVocabulary(centers, counts, seed, history[-1], history)


def assign_types(vectors: np.ndarray, vocab: PoseTypeVocabulary) -> np.ndarray:
    return np.argmin(_sq_dists(np.atleast_2d(vectors), vocab.centers), axis=1)


def assign_type(p: Pose2D, vocab: PoseTypeVocabulary) -> int:
    return int(assign_types(pose_to_vector(p), vocab)[0])


def center_pose(vocab: PoseTypeVocabulary, z: int, r) -> Pose2D:
    """The ``z``-th centre painted with its torso at ``r``."""
    if not 0 <= z < vocab.k:
        raise ParameterError(f"type {z} out of range [0, {vocab.k})")
    return vector_to_pose(vocab.centers[z], r)
