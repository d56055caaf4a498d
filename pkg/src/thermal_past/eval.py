"""Top-k MPJPE, NLL and semantic-score evaluation, the plausibility classifier, and the intensity sweep."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .dataset import PairTable, pool_image
from .errors import DegenerateInputError, ParameterError, SkippedSamplesError
from .models import SemanticNet, TrainConfig, fit, predict_goal, predict_semantic, semantic_inputs
from .models.training import mirror_coords
from .pipeline import InferenceResult, PipelinePredictor
from .pose import GRID_CELLS, GRID_W, IMAGE_H, IMAGE_W, TORSO, Pose2D, ThermalFrame, cell_to_pixel
from .vocabulary import PoseTypeVocabulary

log = logging.getLogger(__name__)

KS = (1, 3, 5)
MAX_SKIP_FRACTION = 0.01
SHIFT_RANGE = (40.0, 120.0)
PERTURB_SIGMA = 15.0
NEGATIVE_KINDS = ("replace", "shift", "perturb")
SEMANTIC_NOTE = "semantic classifier sees the thermal frame; scores are not comparable to an RGB-based classifier"


# ---------------------------------------------------------------- metrics report


@dataclass
class SampleRecord:
    index: int
    clip_id: str
    frame_index: int
    top1: float = math.nan
    top3: float = math.nan
    top5: float = math.nan
    nll: float = math.nan
    semantic: float = math.nan  # fraction of this sample's hypotheses accepted
    skipped: bool = False
    error: str = ""

    def to_json(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in self.__dict__.items()}


def _mean(values) -> float:
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    return float(v.mean()) if len(v) else math.nan


@dataclass
class MetricsReport:
    method: str
    mpjpe_top1: float
    mpjpe_top3: float
    mpjpe_top5: float
    nll: float
    semantic_score: float  # percentage
    n_samples: int
    n_skipped: int
    config_hash: str
    seed: int
    M: int
    records: list[SampleRecord] = field(default_factory=list)
    note: str = SEMANTIC_NOTE

    @classmethod
    def from_records(cls, method, records, config_hash, seed, M) -> "MetricsReport":
        ok = [r for r in records if not r.skipped]
        sem = _mean(r.semantic for r in ok)
        return cls(
            method, _mean(r.top1 for r in ok), _mean(r.top3 for r in ok), _mean(r.top5 for r in ok),
            _mean(r.nll for r in ok), 100.0 * sem if not math.isnan(sem) else math.nan,
            len(ok), len(records) - len(ok), config_hash, seed, M, records,
        )

    def summary(self) -> dict:
        out = {k: getattr(self, k) for k in (
            "method", "mpjpe_top1", "mpjpe_top3", "mpjpe_top5", "nll", "semantic_score",
            "n_samples", "n_skipped", "config_hash", "seed", "M", "note",
        )}
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in out.items()}

    def to_json(self) -> dict:
        d = self.summary()
        d["records"] = [r.to_json() for r in self.records]
        return d

    def save(self, stem) -> tuple[Path, Path]:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        js, cs = stem.with_suffix(".json"), stem.with_suffix(".csv")
        js.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        cols = list(SampleRecord.__dataclass_fields__)
        with open(cs, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.records:
                w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(r, c) for c in cols)])
        return js, cs


def topk_errors(poses: Sequence[Pose2D], gt: Pose2D, ks=KS) -> list[float]:
    """Mean of the k smallest per-hypothesis MPJPEs for each k."""
    mask = gt.valid
    if not mask.any():
        raise DegenerateInputError("ground truth has no valid joints")
    joints = np.stack([p.joints for p in poses])
    errs = np.sort(np.linalg.norm(joints[:, mask] - gt.joints[mask], axis=2).mean(axis=1))
    if len(errs) < max(ks):
        raise ParameterError(f"need at least {max(ks)} hypotheses, got {len(errs)}")
    return [float(errs[:k].mean()) for k in ks]


def _predictor(models, vocab):
    if isinstance(models, (tuple, list)):
        return PipelinePredictor(*models, vocab)
    return models


def evaluate(
    models, vocab: PoseTypeVocabulary | None, test_pairs: PairTable, M: int = 30, seed: int = 0,
    semantic=None, config_hash: str = "", max_skip_fraction: float = MAX_SKIP_FRACTION,
) -> MetricsReport:
    """Top-1/3/5 MPJPE, ground-truth NLL (when the method defines one) and semantic score.

    ``models`` is a (goal, type, pose) tuple or any predictor object with
    ``predict(row, M, seed)``. Sample ``i`` uses seed ``seed ^ i``. Per-sample
    failures are counted as skipped; more than ``max_skip_fraction`` raises
    :class:`SkippedSamplesError` carrying the report.
    """
    if len(test_pairs) == 0:
        raise ParameterError("empty test set")
    predictor = _predictor(models, vocab)
    method = getattr(predictor, "name", type(predictor).__name__)
    nll = np.full(len(test_pairs), math.nan)
    if hasattr(predictor, "nll") and np.all(test_pairs.past_type >= 0):
        nll = predictor.nll(test_pairs)
    records = []
    for i in range(len(test_pairs)):
        row = test_pairs.row(i)
        rec = SampleRecord(i, row.clip_id, row.frame_index, nll=float(nll[i]))
        try:
            poses = predictor.predict(row, M, seed ^ i)
            if len(poses) != M:
                raise ParameterError(f"predictor returned {len(poses)} poses, expected {M}")
            rec.top1, rec.top3, rec.top5 = topk_errors(poses, row.past_pose)
            if semantic is not None:
                accepted = semantic.accepts(np.repeat(row.image[None], M, axis=0), np.stack([p.joints for p in poses]))
                rec.semantic = float(accepted.mean())
        except (ParameterError, DegenerateInputError, ValueError) as exc:
            rec.skipped, rec.error = True, f"{type(exc).__name__}: {exc}"
            log.warning("sample %d skipped: %s", i, rec.error)
        records.append(rec)
    report = MetricsReport.from_records(method, records, config_hash, seed, M)
    if report.n_skipped > max_skip_fraction * len(records):
        err = SkippedSamplesError(report.n_skipped, len(records))
        err.report = report
        raise err
    return report


# ---------------------------------------------------------------- semantic plausibility classifier


@dataclass
class SemanticDataset:
    images: np.ndarray  # (N, 72, 96) pooled
    poses: np.ndarray  # (N, 15, 2)
    labels: np.ndarray  # (N,) 1 plausible, 0 implausible
    kinds: list[str]
    source: np.ndarray  # index of the originating pair
    clip_ids: list[str]

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "SemanticDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return SemanticDataset(
            self.images[idx], self.poses[idx], self.labels[idx], [self.kinds[i] for i in idx],
            self.source[idx], [self.clip_ids[i] for i in idx],
        )


def _in_frame(pose: np.ndarray) -> bool:
    return bool(np.all((pose[:, 0] >= 0) & (pose[:, 0] < IMAGE_W) & (pose[:, 1] >= 0) & (pose[:, 1] < IMAGE_H)))


def _replace(pairs: PairTable, i: int, rng) -> np.ndarray:
    base = pairs.past[i]
    for _ in range(100):
        j = int(rng.integers(len(pairs)))
        other = pairs.past[j]
        cand = other - other[TORSO] + base[TORSO]
        if j != i and not np.allclose(cand, base):
            return cand
    raise DegenerateInputError("no distinct pose available for replacement")


def _shift(base: np.ndarray, rng) -> np.ndarray:
    best = None
    for _ in range(20):
        ang = rng.uniform(0, 2 * np.pi)
        mag = rng.uniform(*SHIFT_RANGE)
        cand = base + mag * np.array([np.cos(ang), np.sin(ang)])
        if _in_frame(cand):
            return cand
        best = cand if best is None else best
    return best


def make_semantic_dataset(pairs: PairTable, seed: int = 0) -> SemanticDataset:
    """Each past pose on its current frame (label 1) plus one negative (label 0).

    Negatives are drawn uniformly among: another pair's pose moved to the same
    torso, the pose translated by 40-120 px, or per-joint Gaussian noise of
    15 px.
    """
    if len(pairs) < 2:
        raise ParameterError("need at least two pairs to build negatives")
    rng = np.random.default_rng(seed)
    n = len(pairs)
    neg = np.empty_like(pairs.past)
    kinds = []
    for i in range(n):
        kind = NEGATIVE_KINDS[int(rng.integers(3))]
        base = pairs.past[i]
        if kind == "replace":
            cand = _replace(pairs, i, rng)
        elif kind == "shift":
            cand = _shift(base, rng)
        else:
            cand = base + rng.normal(0.0, PERTURB_SIGMA, base.shape)
        neg[i] = cand
        kinds.append(kind)
    return SemanticDataset(
        np.concatenate([pairs.images, pairs.images]),
        np.concatenate([pairs.past, neg]),
        np.concatenate([np.ones(n, np.int64), np.zeros(n, np.int64)]),
        ["positive"] * n + kinds,
        np.concatenate([np.arange(n), np.arange(n)]),
        list(pairs.clip_ids) * 2,
    )


@dataclass
class SemanticClassifier:
    model: SemanticNet
    threshold: float = 0.5
    test_accuracy: float = math.nan
    train_accuracy: float = math.nan
    loss_curve: list[float] = field(default_factory=list)

    def probabilities(self, images, poses) -> np.ndarray:
        return predict_semantic(self.model, images, poses)

    def accepts(self, images, poses) -> np.ndarray:
        return self.probabilities(images, poses) >= self.threshold

    def accuracy(self, data: SemanticDataset) -> float:
        return float(np.mean(self.accepts(data.images, data.poses) == data.labels.astype(bool)))


def _semantic_batch(data: SemanticDataset, idx, rng, cfg: TrainConfig):
    images = data.images[idx].copy()
    poses = data.poses[idx].copy()
    if cfg.flip:
        f = rng.random(len(idx)) < 0.5
        images[f] = images[f][:, :, ::-1]
        poses[f] = mirror_coords(poses[f])
    return images, poses, data.labels[idx]


def train_semantic(
    dataset: SemanticDataset, config: TrainConfig | None = None, heldout: SemanticDataset | None = None,
) -> SemanticClassifier:
    """Binary cross-entropy training; flip augmentation mirrors image and pose together.

    Accuracy is reported on ``heldout`` (or on the training set when absent).
    """
    if len(dataset) == 0:
        raise ParameterError("empty semantic dataset")
    cfg = config or TrainConfig.desk("semantic")
    torch.manual_seed(cfg.seed)
    model = SemanticNet(cfg.net)
    bce = torch.nn.BCEWithLogitsLoss()

    def loss_fn(m, idx, rng):
        images, poses, labels = _semantic_batch(dataset, idx, rng, cfg)
        return bce(m(semantic_inputs(images, poses)), torch.from_numpy(labels.astype(np.float32)))

    curve = fit(model, len(dataset), loss_fn, cfg)
    model.trained = True
    clf = SemanticClassifier(model, loss_curve=curve)
    clf.train_accuracy = clf.accuracy(dataset)
    clf.test_accuracy = clf.accuracy(heldout) if heldout is not None else clf.train_accuracy
    return clf


def semantic_score(classifier, results: Sequence[InferenceResult], images) -> float:
    """Percentage of all hypotheses the classifier accepts."""
    if len(results) != len(images):
        raise ParameterError("one image per inference result is required")
    accepted = total = 0
    for res, img in zip(results, images):
        img = pool_image(img.values if isinstance(img, ThermalFrame) else img)
        poses = np.stack([h.pose.joints for h in res.hypotheses])
        accepted += int(classifier.accepts(np.repeat(img[None], len(poses), axis=0), poses).sum())
        total += len(poses)
    if total == 0:
        raise ParameterError("no hypotheses to score")
    return 100.0 * accepted / total


# ---------------------------------------------------------------- thermal intensity sweep


def _mask(mark_region, shape) -> np.ndarray:
    if isinstance(mark_region, np.ndarray) and mark_region.dtype == bool:
        if mark_region.shape != shape:
            raise ParameterError(f"mark mask must be {shape}, got {mark_region.shape}")
        return mark_region
    x0, y0, x1, y1 = (int(v) for v in mark_region)
    m = np.zeros(shape, dtype=bool)
    m[max(y0, 0) : max(y1, 0), max(x0, 0) : max(x1, 0)] = True
    return m


def scale_marks(image: np.ndarray, mask: np.ndarray, scale: float, background) -> np.ndarray:
    """Scale the mark's excess over ``background`` inside ``mask``, clamped to [0, 1]."""
    out = image.copy()
    bg = np.broadcast_to(np.asarray(background, dtype=image.dtype), image.shape)
    out[mask] = np.clip(bg[mask] + np.asarray(scale, dtype=image.dtype) * (image[mask] - bg[mask]), 0.0, 1.0)
    return out


def expected_distance(goal_probs: np.ndarray, point) -> float:
    """Exact expectation of the cell-centre distance to ``point`` over the 72x96 grid."""
    rows, cols = np.divmod(np.arange(GRID_CELLS), GRID_W)
    xy = cell_to_pixel(rows, cols)
    d = np.linalg.norm(xy - np.asarray(point, dtype=np.float64), axis=1)
    return float(np.dot(goal_probs.reshape(-1), d))


def intensity_sweep(
    goal_model, image, p: Pose2D, mark_region, scales: Sequence[float], background=None,
) -> list[tuple[float, float]]:
    """Expected goal-to-mark distance as the mark intensity is scaled.

    ``mark_region`` is a boolean 288x384 mask or an ``(x0, y0, x1, y1)`` box.
    ``background`` is the mark-free image (or a scalar level); by default the
    median of the pixels outside the region.
    """
    img = np.asarray(image.values if isinstance(image, ThermalFrame) else image, dtype=np.float32)
    mask = _mask(mark_region, img.shape)
    if not mask.any():
        raise ParameterError("empty mark region")
    if any(not s >= 0 for s in scales):
        raise ParameterError("scales must be non-negative")
    if background is None:
        background = float(np.median(img[~mask])) if (~mask).any() else 0.0
    ys, xs = np.nonzero(mask)
    centroid = (xs.mean() + 0.5, ys.mean() + 0.5)
    images = np.stack([pool_image(scale_marks(img, mask, s, background)) for s in scales])
    logp = predict_goal(goal_model, images, np.repeat(p.joints[None], len(scales), axis=0))
    probs = np.exp(logp)
    probs /= probs.sum(axis=1, keepdims=True)
    return [(float(s), expected_distance(pr, centroid)) for s, pr in zip(scales, probs)]
