"""Teacher-forced training with flip and crop augmentation, checkpoints and loss curves."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import cv2
import numpy as np
import torch

from ..dataset import PairTable, SamplePair
from ..errors import ParameterError
from ..pose import GRID_H, GRID_W, IMAGE_H, IMAGE_W, J, NON_TORSO, SKELETON, TORSO, pixel_to_cell
from ..vocabulary import PoseTypeVocabulary, assign_types
from . import encoding
from .losses import class_nll, grid_nll
from .networks import NetConfig, build_model

MODULES = ("goal", "type", "pose", "heatmap", "semantic")
FLIP_PERM = SKELETON.flip_permutation

# (learning rate, batch size) at full scale; heatmap baseline borrows the pose settings
FULL_SCALE = {
    "goal": (5e-5, 32),
    "type": (5e-5, 128),
    "pose": (1e-4, 32),
    "heatmap": (1e-4, 32),
    "semantic": (3e-5, 128),
}


@dataclass
class TrainConfig:
    learning_rate: float
    batch_size: int
    iterations: int = 6000
    seed: int = 0
    flip: bool = True
    crop: bool = True
    crop_scale: tuple[float, float] = (0.85, 1.0)
    weight_decay: float = 0.0
    schedule: str = "constant"  # or "cosine"
    checkpoint_every: int = 0
    net: NetConfig = field(default_factory=NetConfig.full)

    def __post_init__(self):
        if not self.learning_rate > 0 or self.batch_size < 1 or self.iterations < 1:
            raise ParameterError("learning_rate, batch_size and iterations must be positive")
        if self.weight_decay < 0 or self.checkpoint_every < 0:
            raise ParameterError("weight_decay and checkpoint_every must be non-negative")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ParameterError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if self.schedule not in ("constant", "cosine"):
            raise ParameterError(f"unknown schedule {self.schedule!r}")
        self.crop_scale = (float(lo), float(hi))

    @classmethod
    def full(cls, module: str, **overrides) -> "TrainConfig":
        lr, bs = FULL_SCALE[module]
        kw = dict(learning_rate=lr, batch_size=bs, weight_decay=1e-3 if module == "semantic" else 0.0)
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def desk(cls, module: str, **overrides) -> "TrainConfig":
        # short CPU runs need a larger step than the full-scale rates
        kw = dict(
            learning_rate=1e-3, batch_size=16, iterations=1500, schedule="cosine", net=NetConfig.desk(),
            weight_decay=1e-3 if module == "semantic" else 0.0,
        )
        kw.update(overrides)
        return cls(**kw)

    def to_json(self) -> dict:
        d = asdict(self)
        d["crop_scale"] = list(self.crop_scale)
        d["net"] = self.net.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["crop_scale"] = tuple(d["crop_scale"])
        d["net"] = NetConfig.from_json(d["net"])
        return cls(**d)


@dataclass
class TrainResult:
    model: torch.nn.Module
    module: str
    loss_curve: list[float]
    initial_loss: float
    final_loss: float
    config: TrainConfig
    checkpoint: Path | None = None


# ---------------------------------------------------------------- augmentation


def mirror_coords(points: np.ndarray) -> np.ndarray:
    """``x -> W - x`` with left/right joints swapped; points (..., 15, 2)."""
    out = points[..., FLIP_PERM, :].copy()
    out[..., 0] = IMAGE_W - out[..., 0]
    return out


def mirror_cells(cells: np.ndarray) -> np.ndarray:
    """Mirror (row, col) target cells (..., 15, 2) on the 72x96 grid."""
    out = cells[..., FLIP_PERM, :].copy()
    out[..., 1] = GRID_W - 1 - out[..., 1]
    return out


def flip_type_table(vocab: PoseTypeVocabulary) -> np.ndarray:
    """Type index of each mirrored cluster centre."""
    rel = np.zeros((vocab.k, J, 2))
    rel[:, NON_TORSO] = vocab.centers.reshape(vocab.k, J - 1, 2)
    m = rel[:, FLIP_PERM].copy()
    m[..., 0] *= -1
    return assign_types(m[:, NON_TORSO].reshape(vocab.k, -1), vocab)


def crop_image(image: np.ndarray, x0: float, y0: float, s: float) -> np.ndarray:
    """Zoom a pooled frame so the pixel window [x0, x0+sW) x [y0, y0+sH) fills it."""
    m = np.array([[s, 0.0, (x0 + 2 * s - 2) / 4.0], [0.0, s, (y0 + 2 * s - 2) / 4.0]])
    return cv2.warpAffine(
        image, m, (GRID_W, GRID_H), flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP, borderMode=cv2.BORDER_REPLICATE
    )


@dataclass
class Batch:
    images: np.ndarray
    current: np.ndarray
    past: np.ndarray
    cells: np.ndarray  # (B, 15, 2) target (row, col)
    types: np.ndarray | None
    keep: np.ndarray


def augment_batch(
    table: PairTable, idx, rng: np.random.Generator, flip: bool, crop: bool,
    crop_scale=(0.85, 1.0), targets: str = "all", flip_types: np.ndarray | None = None,
) -> Batch:
    """Crop then flip a batch; target cells are snapped before the flip and mirrored on the grid.

    ``targets`` names the points that must stay inside a crop ("torso" or
    "all"); pairs violating it are marked in ``keep``.
    """
    idx = np.asarray(idx)
    images = table.images[idx].copy()
    current = table.current[idx].copy()
    past = table.past[idx].copy()
    types = table.past_type[idx].copy()
    b = len(idx)
    keep = np.ones(b, dtype=bool)
    if crop:
        s = rng.uniform(crop_scale[0], crop_scale[1], b)
        x0 = rng.random(b) * IMAGE_W * (1 - s)
        y0 = rng.random(b) * IMAGE_H * (1 - s)
        for i in range(b):
            images[i] = crop_image(images[i], x0[i], y0[i], s[i])
        shift = np.stack([x0, y0], axis=1)[:, None, :]
        current = (current - shift) / s[:, None, None]
        past = (past - shift) / s[:, None, None]
        pts = past[:, [TORSO]] if targets == "torso" else past
        inside = (pts[..., 0] >= 0) & (pts[..., 0] < IMAGE_W) & (pts[..., 1] >= 0) & (pts[..., 1] < IMAGE_H)
        keep &= inside.all(axis=1)
    cells = pixel_to_cell(past)
    if flip:
        f = rng.random(b) < 0.5
        images[f] = images[f][:, :, ::-1]
        current[f] = mirror_coords(current[f])
        past[f] = mirror_coords(past[f])
        cells[f] = mirror_cells(cells[f])
        if flip_types is not None:
            types[f] = flip_types[types[f]]
    return Batch(images, current, past, cells, types, keep)


def plain_batch(table: PairTable, idx) -> Batch:
    idx = np.asarray(idx)
    return Batch(
        table.images[idx], table.current[idx], table.past[idx], pixel_to_cell(table.past[idx]),
        table.past_type[idx], np.ones(len(idx), dtype=bool),
    )


# ---------------------------------------------------------------- per-module losses


def painted_centers(vocab: PoseTypeVocabulary, types: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Cluster centres of ``types`` composed at torso positions ``r`` -> (B, 15, 2)."""
    out = np.empty((len(types), J, 2))
    out[:, TORSO] = r
    out[:, NON_TORSO] = vocab.centers[types].reshape(len(types), J - 1, 2) + r[:, None, :]
    return out


def batch_nll(model, module: str, batch: Batch, vocab: PoseTypeVocabulary | None) -> torch.Tensor:
    """Per-sample teacher-forced NLL of the batch's ground truth."""
    r = batch.past[:, TORSO]
    if module == "goal":
        logp = model(encoding.goal_inputs(batch.images, batch.current))
        return grid_nll(logp, torch.from_numpy(batch.cells[:, [TORSO]]))
    if module == "type":
        logp = model(encoding.type_inputs(batch.images, batch.current, r))
        return class_nll(logp, torch.from_numpy(batch.types))
    if module == "pose":
        center = painted_centers(vocab, batch.types, r)
        logp = model(encoding.pose_inputs(batch.images, batch.current, r, center))
        return grid_nll(logp, torch.from_numpy(batch.cells[:, NON_TORSO]))
    if module == "heatmap":
        logp = model(encoding.goal_inputs(batch.images, batch.current))
        return grid_nll(logp, torch.from_numpy(batch.cells))
    raise ParameterError(f"unknown module {module!r}")


def module_losses(model, module: str, table: PairTable, vocab: PoseTypeVocabulary | None = None, chunk: int = 64) -> np.ndarray:
    """Per-pair NLL without augmentation."""
    model.eval()
    out = []
    with torch.no_grad():
        for s in range(0, len(table), chunk):
            idx = np.arange(s, min(s + chunk, len(table)))
            out.append(batch_nll(model, module, plain_batch(table, idx), vocab).double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


# ---------------------------------------------------------------- optimisation loop


def fit(
    model: torch.nn.Module, n: int, loss_fn: Callable, config: TrainConfig,
    on_checkpoint: Callable[[int, torch.nn.Module], None] | None = None,
) -> list[float]:
    """Adam over shuffled epochs; ``loss_fn(model, idx, rng)`` returns a scalar tensor."""
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    sched = None
    if config.schedule == "cosine":
        sched = torch.optim.lr_scheduler.LambdaLR(
            opt, lambda i: 0.5 * (1.0 + math.cos(math.pi * min(i, config.iterations) / config.iterations))
        )
    bs = min(config.batch_size, n)
    order = np.zeros(0, dtype=np.int64)
    curve: list[float] = []
    for it in range(1, config.iterations + 1):
        while len(order) < bs:
            order = np.concatenate([order, rng.permutation(n)])
        idx, order = order[:bs], order[bs:]
        model.train()
        loss = loss_fn(model, idx, rng)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if sched is not None:
            sched.step()
        curve.append(float(loss.detach()))
        if on_checkpoint is not None and config.checkpoint_every and it % config.checkpoint_every == 0:
            model.eval()
            on_checkpoint(it, model)
    model.eval()
    return curve


def _as_table(pairs) -> PairTable:
    if isinstance(pairs, PairTable):
        return pairs
    return PairTable.from_pairs(list(pairs))


def train_module(
    module: str,
    pairs: PairTable | Sequence[SamplePair],
    vocab: PoseTypeVocabulary | None = None,
    config: TrainConfig | None = None,
    out_dir=None,
    on_checkpoint: Callable[[int, torch.nn.Module], None] | None = None,
    data_hash: str | None = None,
) -> TrainResult:
    """Train one stage (goal, type, pose) or the direct heatmap baseline.

    Type and pose stages are conditioned on the ground-truth torso and type.
    Crop keeps the type label; flip maps it to the mirrored centre's type.
    """
    if module not in ("goal", "type", "pose", "heatmap"):
        raise ParameterError(f"unknown module {module!r}; the semantic classifier trains via eval.train_semantic")
    table = _as_table(pairs)
    if len(table) == 0:
        raise ParameterError("cannot train on an empty pair set")
    needs_types = module in ("type", "pose")
    if needs_types:
        if vocab is None:
            raise ParameterError(f"{module} training needs a vocabulary")
        if np.any(table.past_type < 0):
            raise ParameterError(f"{module} training needs past_type on every pair")
        if np.any(table.past_type >= vocab.k):
            raise ParameterError("past_type outside the vocabulary")
    config = config or TrainConfig.desk(module)
    torch.manual_seed(config.seed)
    model = build_model(module, config.net, k=vocab.k if module == "type" else None)
    flip_types = flip_type_table(vocab) if needs_types else None
    targets = "torso" if module in ("goal", "type") else "all"

    def loss_fn(m, idx, rng):
        batch = augment_batch(table, idx, rng, config.flip, config.crop, config.crop_scale, targets, flip_types)
        if not batch.keep.any():
            batch = plain_batch(table, idx)
        nll = batch_nll(m, module, batch, vocab)
        keep = torch.from_numpy(batch.keep)
        return nll[keep].mean()

    initial = float(module_losses(model, module, table, vocab).mean())
    curve = fit(model, len(table), loss_fn, config, on_checkpoint)
    model.trained = True
    final = float(module_losses(model, module, table, vocab).mean())
    result = TrainResult(model, module, curve, initial, final, config)
    if out_dir is not None:
        result.checkpoint = save_checkpoint(
            model, Path(out_dir) / module, module, config, vocab=vocab,
            data_hash=data_hash or table.digest(), final_loss=final,
        )
        write_loss_curve(Path(out_dir) / f"{module}_loss.csv", curve)
    return result


# ---------------------------------------------------------------- persistence


def write_loss_curve(path, curve: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(curve, start=1):
            w.writerow([i, repr(float(v))])


def save_checkpoint(
    model, stem, module: str, config: TrainConfig, vocab: PoseTypeVocabulary | None = None,
    data_hash: str | None = None, final_loss: float | None = None,
) -> Path:
    """Write ``<stem>.pt`` weights and a ``<stem>.json`` sidecar; returns the weights path."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    pt = stem.with_suffix(".pt")
    torch.save(model.state_dict(), pt)
    sidecar = {
        "module": module,
        "config": config.to_json(),
        "k": getattr(model, "k", None),
        "vocab_hash": vocab.digest() if vocab is not None else None,
        "data_hash": data_hash,
        "final_loss": final_loss,
    }
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return pt


def load_checkpoint(path) -> tuple[torch.nn.Module, dict]:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    config = TrainConfig.from_json(sidecar["config"])
    model = build_model(sidecar["module"], config.net, k=sidecar.get("k"))
    model.load_state_dict(torch.load(path.with_suffix(".pt"), weights_only=True))
    model.trained = True
    model.eval()
    return model, sidecar
