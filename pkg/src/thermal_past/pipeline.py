"""Stochastic past-pose inference, ground-truth likelihood and the retrieval baselines."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import PairRow, PairTable, SamplePair, pool_image
from .errors import DegenerateInputError, ParameterError
from .models import module_losses, painted_centers, predict_goal, predict_heatmap, predict_pose, predict_type
from .models.losses import LOG_FLOOR
from .pose import (
    GRID_CELLS, GRID_H, GRID_W, IMAGE_H, IMAGE_W, J, NON_TORSO, TORSO, HeatmapGrid, Pose2D, ThermalFrame,
    cell_to_pixel, compose_pose, pixel_to_cell, sample_cells,
)
from .vocabulary import PoseTypeVocabulary

log = logging.getLogger(__name__)

DEFAULT_M = 30
DEFAULT_TOPK = 5


@dataclass
class Hypothesis:
    pose: Pose2D
    r: np.ndarray
    z: int
    logp_r: float
    logp_z: float
    logp_joints: np.ndarray  # (14,)

    def to_json(self) -> dict:
        return {
            "pose": self.pose.to_json(),
            "r": [float(v) for v in self.r],
            "z": int(self.z),
            "logp_r": float(self.logp_r),
            "logp_z": float(self.logp_z),
            "logp_joints": [float(v) for v in self.logp_joints],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Hypothesis":
        return cls(
            Pose2D.from_json(d["pose"]), np.asarray(d["r"], dtype=np.float64), int(d["z"]),
            float(d["logp_r"]), float(d["logp_z"]), np.asarray(d["logp_joints"], dtype=np.float64),
        )


@dataclass
class InferenceResult:
    hypotheses: list[Hypothesis]
    M: int
    seed: int
    topk: int = DEFAULT_TOPK

    def __post_init__(self):
        if len(self.hypotheses) != self.M:
            raise ParameterError(f"expected {self.M} hypotheses, got {len(self.hypotheses)}")

    @property
    def poses(self) -> list[Pose2D]:
        return [h.pose for h in self.hypotheses]

    def to_json(self) -> dict:
        return {"M": self.M, "seed": self.seed, "topk": self.topk, "hypotheses": [h.to_json() for h in self.hypotheses]}

    @classmethod
    def from_json(cls, d: dict) -> "InferenceResult":
        return cls([Hypothesis.from_json(h) for h in d["hypotheses"]], d["M"], d["seed"], d.get("topk", DEFAULT_TOPK))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True))


def _pooled(image) -> np.ndarray:
    return pool_image(image.values if isinstance(image, ThermalFrame) else image)


def _check_models(goal, type_m, pose_m, vocab: PoseTypeVocabulary, allow_untrained: bool) -> None:
    if not allow_untrained:
        for name, m in (("goal", goal), ("type", type_m), ("pose", pose_m)):
            if not getattr(m, "trained", False):
                raise ParameterError(f"{name} model is untrained")
    if getattr(type_m, "k", vocab.k) != vocab.k:
        raise ParameterError(f"type model has k={type_m.k} but the vocabulary has k={vocab.k}")


def topk_sample(probs: np.ndarray, topk: int, rng: np.random.Generator) -> int:
    """Sample from the ``topk`` most probable classes after renormalising them.

    Ties are broken towards the lower class index.
    """
    order = np.argsort(-probs, kind="stable")[:topk]
    p = probs[order]
    total = p.sum()
    p = np.full(len(order), 1.0 / len(order)) if not total > 0 else p / total
    return int(order[rng.choice(len(order), p=p)])


def goal_distribution(logp_goal: np.ndarray) -> np.ndarray:
    p = np.exp(logp_goal)
    total = p.sum()
    if not np.isfinite(total) or total <= 0:
        log.warning("degenerate goal distribution; falling back to uniform")
        return np.full(GRID_CELLS, 1.0 / GRID_CELLS)
    return p / total


def infer_past(
    goal, type_m, pose_m, vocab: PoseTypeVocabulary, image, p: Pose2D,
    M: int = DEFAULT_M, topk: int = DEFAULT_TOPK, seed: int = 0, allow_untrained: bool = False,
) -> InferenceResult:
    """Sample ``M`` past poses: torso cells from the goal map (with replacement),
    a type from the renormalised top-``topk`` classes at each torso, and joints by
    per-channel argmax of the pose stage composed with the torso.
    """
    if M <= 0:
        raise ParameterError(f"M must be positive, got {M}")
    if topk <= 0:
        raise ParameterError(f"topk must be positive, got {topk}")
    _check_models(goal, type_m, pose_m, vocab, allow_untrained)
    img = _pooled(image)[None]
    cur = p.joints[None]
    rng = np.random.default_rng(seed)

    logp_goal = predict_goal(goal, img, cur)[0]
    probs = goal_distribution(logp_goal)
    cells = sample_cells(HeatmapGrid(probs.reshape(1, GRID_H, GRID_W)), rng, size=M)
    rows, cols = np.divmod(cells, GRID_W)
    r = cell_to_pixel(rows, cols)

    imgs = np.repeat(img, M, axis=0)
    curs = np.repeat(cur, M, axis=0)
    logp_type = predict_type(type_m, imgs, curs, r)
    z = np.array([topk_sample(np.exp(lp), topk, rng) for lp in logp_type], dtype=np.int64)

    logp_pose = predict_pose(pose_m, imgs, curs, r, painted_centers(vocab, z, r))
    best = np.argmax(logp_pose, axis=2)
    flat = logp_pose.reshape(M * (J - 1), -1)
    degenerate = (flat.max(axis=1) == flat.min(axis=1)).reshape(M, J - 1)
    jr, jc = np.divmod(best, GRID_W)
    q = cell_to_pixel(jr, jc)
    q[degenerate] = (IMAGE_W / 2.0, IMAGE_H / 2.0)

    hyps = []
    for i in range(M):
        hyps.append(Hypothesis(
            compose_pose(q[i], r[i]), r[i].copy(), int(z[i]),
            float(max(logp_goal[cells[i]], LOG_FLOOR)), float(max(logp_type[i, z[i]], LOG_FLOOR)),
            np.maximum(np.take_along_axis(logp_pose[i], best[i][:, None], axis=1)[:, 0], LOG_FLOOR),
        ))
    return InferenceResult(hyps, M, int(seed), topk)


# ---------------------------------------------------------------- ground-truth likelihood


def _table(samples) -> PairTable:
    if isinstance(samples, PairTable):
        return samples
    if isinstance(samples, SamplePair):
        samples = [samples]
    return PairTable.from_pairs(list(samples))


def nll_table(goal, type_m, pose_m, vocab: PoseTypeVocabulary, samples) -> np.ndarray:
    """Per-sample teacher-forced NLL: goal + type + 14 joints, cells snapped to 72x96."""
    table = _table(samples)
    if np.any(table.past_type < 0):
        raise ParameterError("nll needs past_type on every sample")
    if np.any(table.past_type >= vocab.k):
        raise ParameterError("past_type outside the vocabulary")
    if not np.all(np.isfinite(table.past)):
        raise DegenerateInputError("ground-truth joints must be finite")
    return (
        module_losses(goal, "goal", table, vocab)
        + module_losses(type_m, "type", table, vocab)
        + module_losses(pose_m, "pose", table, vocab)
    )


def nll_ground_truth(goal, type_m, pose_m, vocab: PoseTypeVocabulary, sample: SamplePair) -> float:
    if sample.past_type is None:
        raise ParameterError("sample.past_type must be set")
    if not sample.past_pose.valid.all():
        raise DegenerateInputError("ground-truth past pose has invalid joints")
    return float(nll_table(goal, type_m, pose_m, vocab, [sample])[0])


# ---------------------------------------------------------------- KNN baseline


def aligned_vectors(poses: np.ndarray) -> np.ndarray:
    """Torso-relative non-torso joints, (N, 15, 2) -> (N, 28)."""
    poses = np.asarray(poses, dtype=np.float64)
    return (poses[:, NON_TORSO] - poses[:, TORSO : TORSO + 1]).reshape(len(poses), -1)


@dataclass
class KnnPool:
    keys: np.ndarray  # (N, 28) torso-aligned current poses
    current: np.ndarray  # (N, 15, 2)
    past: np.ndarray  # (N, 15, 2)
    clip_ids: list[str] = field(default_factory=list)
    frame_index: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __len__(self):
        return len(self.keys)

    def save(self, stem) -> None:
        stem = Path(stem)
        np.savez(stem.with_suffix(".npz"), keys=self.keys, current=self.current, past=self.past, frame_index=self.frame_index)
        stem.with_suffix(".json").write_text(json.dumps({"size": len(self), "clip_ids": self.clip_ids}))

    @classmethod
    def load(cls, stem) -> "KnnPool":
        stem = Path(stem)
        d = np.load(stem.with_suffix(".npz"))
        meta = json.loads(stem.with_suffix(".json").read_text())
        return cls(d["keys"], d["current"], d["past"], meta["clip_ids"], d["frame_index"])


def knn_baseline_build(train_pairs, stride: int = 15) -> KnnPool:
    """Keep every ``stride``-th pair of each clip, in frame order."""
    if stride < 1:
        raise ParameterError("stride must be >= 1")
    table = _table(train_pairs)
    keep = []
    for cid in dict.fromkeys(table.clip_ids):
        idx = np.array([i for i, c in enumerate(table.clip_ids) if c == cid])
        idx = idx[np.argsort(table.frame_index[idx], kind="stable")]
        keep.extend(idx[::stride])
    keep = np.array(keep, dtype=np.int64)
    return KnnPool(
        aligned_vectors(table.current[keep]) if len(keep) else np.zeros((0, 2 * (J - 1))),
        table.current[keep].copy(), table.past[keep].copy(),
        [table.clip_ids[i] for i in keep], table.frame_index[keep].copy(),
    )


def knn_indices(pool: KnnPool, p: Pose2D, M: int = DEFAULT_M) -> np.ndarray:
    if M <= 0:
        raise ParameterError(f"M must be positive, got {M}")
    if len(pool) < M:
        raise ParameterError(f"pool has {len(pool)} entries, fewer than M={M}")
    q = aligned_vectors(p.joints[None])[0]
    d = np.sqrt(((pool.keys - q) ** 2).sum(axis=1))
    return np.argsort(d, kind="stable")[:M]


def knn_baseline_query(pool: KnnPool, p: Pose2D, M: int = DEFAULT_M) -> list[Pose2D]:
    """Past poses of the ``M`` nearest current poses, moved by the query/neighbour torso offset."""
    idx = knn_indices(pool, p, M)
    offset = p.joints[TORSO] - pool.current[idx, TORSO]
    return [Pose2D(pool.past[i] + o) for i, o in zip(idx, offset)]


# ---------------------------------------------------------------- direct heatmap baseline


def baseline_candidates(train_poses, subsample: float = 1 / 200) -> np.ndarray:
    """Every ``round(1/subsample)``-th training past pose, at its stored coordinates."""
    if not 0 < subsample <= 1:
        raise ParameterError("subsample must be in (0, 1]")
    arr = train_poses.past if isinstance(train_poses, PairTable) else np.asarray(
        [q.joints if isinstance(q, Pose2D) else q for q in train_poses], dtype=np.float64
    )
    return arr[:: int(round(1 / subsample))].copy()


def score_candidates(logp: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Summed per-joint log-probability of each candidate (C, 15, 2) under maps (15, 6912)."""
    cells = pixel_to_cell(candidates)
    flat = cells[..., 0] * GRID_W + cells[..., 1]
    return np.maximum(logp[np.arange(J)[None, :], flat], LOG_FLOOR).sum(axis=1)


def heatmap_baseline(
    model, train_poses, image, p: Pose2D, M: int = DEFAULT_M, subsample: float = 1 / 200,
    candidates: np.ndarray | None = None, return_scores: bool = False,
):
    """The ``M`` training poses with the highest likelihood under the predicted maps.

    Sorted by descending score; ties keep candidate order.
    """
    cand = baseline_candidates(train_poses, subsample) if candidates is None else candidates
    if len(cand) < M:
        raise ParameterError(f"{len(cand)} candidates, fewer than M={M}")
    logp = predict_heatmap(model, _pooled(image)[None], p.joints[None])[0]
    scores = score_candidates(logp, cand)
    order = np.argsort(-scores, kind="stable")[:M]
    poses = [Pose2D(cand[i]) for i in order]
    return (poses, scores[order]) if return_scores else poses


# ---------------------------------------------------------------- predictors used by evaluation


class PipelinePredictor:
    name = "ours"

    def __init__(self, goal, type_m, pose_m, vocab: PoseTypeVocabulary, topk: int = DEFAULT_TOPK, allow_untrained: bool = False):
        _check_models(goal, type_m, pose_m, vocab, allow_untrained)
        self.goal, self.type_m, self.pose_m, self.vocab, self.topk = goal, type_m, pose_m, vocab, topk
        self.allow_untrained = allow_untrained

    def predict(self, row: PairRow, M: int, seed: int) -> list[Pose2D]:
        return self.infer(row, M, seed).poses

    def infer(self, row: PairRow, M: int, seed: int) -> InferenceResult:
        return infer_past(
            self.goal, self.type_m, self.pose_m, self.vocab, row.image, row.current_pose,
            M=M, topk=self.topk, seed=seed, allow_untrained=self.allow_untrained,
        )

    def nll(self, table: PairTable) -> np.ndarray:
        return nll_table(self.goal, self.type_m, self.pose_m, self.vocab, table)


class KnnPredictor:
    name = "knn"

    def __init__(self, pool: KnnPool):
        self.pool = pool

    def predict(self, row: PairRow, M: int, seed: int) -> list[Pose2D]:
        return knn_baseline_query(self.pool, row.current_pose, M)


class HeatmapBaselinePredictor:
    name = "heatmap-baseline"

    def __init__(self, model, train_poses, subsample: float = 1 / 200):
        self.model = model
        self.candidates = baseline_candidates(train_poses, subsample)

    def predict(self, row: PairRow, M: int, seed: int) -> list[Pose2D]:
        return heatmap_baseline(self.model, None, row.image, row.current_pose, M, candidates=self.candidates)


class OraclePredictor:
    """Returns the ground-truth past pose ``M`` times (wiring checks)."""

    name = "oracle"

    def predict(self, row: PairRow, M: int, seed: int) -> list[Pose2D]:
        return [row.past_pose] * M


def nll_uniform(k: int) -> float:
    """NLL of any sample under uniform goal, type and pose outputs."""
    return J * math.log(GRID_CELLS) + math.log(k)
