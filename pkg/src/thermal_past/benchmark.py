"""Fixed-seed synthetic benchmark: thermal vs mark-ablated pipelines, KNN baseline,
semantic classifier and the intensity sweep, with on-disk caching of every stage."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import cv2
import numpy as np
import torch
from scipy.stats import rankdata, spearmanr

from . import synth
from .dataset import FPS, PairTable, pair_indices, pool_image
from .eval import (
    MetricsReport, SemanticClassifier, evaluate, intensity_sweep, make_semantic_dataset, train_semantic,
)
from .models import TrainConfig, load_checkpoint, save_checkpoint, train_module
from .pipeline import KnnPredictor, PipelinePredictor, knn_baseline_build
from .pose import Pose2D
from .vocabulary import PoseTypeVocabulary, build_vocabulary, poses_to_vectors

log = logging.getLogger(__name__)

CONDITIONS = ("thermal", "ablated")
SWEEP_SCALES = (0.25, 0.5, 0.75, 1.0)
OFFSET = 45


@dataclass
class BenchmarkConfig:
    n_train: int = 200
    n_test: int = 40
    duration_s: float = 30.0
    tau: float = synth.DEFAULT_TAU
    seed: int = 0
    train_stride: int = 5
    test_stride: int = 20
    k: int = 32
    vocab_seed: int = 0
    iterations: dict = field(default_factory=lambda: {"goal": 1500, "type": 1000, "pose": 1500, "semantic": 2000})
    batch_size: int = 16
    learning_rate: float = 1e-3
    knn_stride: int = 3  # pairs are every 5 frames, so one pool entry per 15 frames
    M: int = 30
    topk: int = 5
    eval_seed: int = 0
    sweep_scenes: int = 24
    sweep_scales: tuple = SWEEP_SCALES

    def to_json(self) -> dict:
        d = asdict(self)
        d["sweep_scales"] = list(self.sweep_scales)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:12]

    def train_config(self, module: str) -> TrainConfig:
        return TrainConfig.desk(
            module, iterations=self.iterations[module], batch_size=self.batch_size,
            learning_rate=self.learning_rate, seed=self.seed,
        )


# ---------------------------------------------------------------- data


@dataclass
class SweepScene:
    image: np.ndarray  # full-resolution thermal frame
    background: np.ndarray  # same frame rendered with marks ablated
    mask: np.ndarray  # pixels of the most recent mark
    current: np.ndarray  # (15, 2)


def _tables(rows: list[dict]) -> dict[str, PairTable]:
    out = {}
    for cond in CONDITIONS:
        if not rows:
            out[cond] = PairTable.empty()
            continue
        out[cond] = PairTable(
            np.stack([r[cond] for r in rows]), np.stack([r["current"] for r in rows]),
            np.stack([r["past"] for r in rows]), np.full(len(rows), -1, np.int64),
            [r["clip_id"] for r in rows], np.array([r["t"] for r in rows], dtype=np.int64),
        )
    return out


def _recent_mark(image: np.ndarray, background: np.ndarray, pose: Pose2D) -> np.ndarray | None:
    """Largest connected mark region not covered by the actor."""
    diff = (image != background) & ~synth.silhouette(pose)
    n, labels, stats, _ = cv2.connectedComponentsWithStats(diff.astype(np.uint8), connectivity=8)
    if n <= 1:
        return None
    best = 1 + int(np.argmax(stats[1:, cv2.CC_STAT_AREA]))
    if stats[best, cv2.CC_STAT_AREA] < 30:
        return None
    return labels == best


def simulate_split(cfg: BenchmarkConfig, first: int, count: int, stride: int, sweep: bool = False):
    """Pooled thermal and ablated frames for the selected pairs of each clip.

    With ``sweep`` set, also keeps one full-resolution frame per clip whose
    past pose was in contact with furniture and whose mark is visible.
    """
    rows, scenes = [], []
    for i in range(first, first + count):
        seed = synth.clip_seed(cfg.seed, i)
        scene = synth.generate_scene(seed)
        script = synth.script_episode(scene, seed, cfg.duration_s, FPS)
        bg = synth.scene_background(scene)
        sims = list(synth.iter_simulation(scene, script, cfg.tau, FPS, 0.8, seed))
        poses = [s.pose for s in sims]
        keep = set(pair_indices(poses, FPS, OFFSET, stride))
        sweep_t = None
        if sweep:
            cands = [t for t in pair_indices(poses, FPS, OFFSET, 1) if sims[t - OFFSET].action in synth.INTERACTIONS]
            sweep_t = cands[len(cands) // 2] if cands else None
        for t in sorted(keep | ({sweep_t} if sweep_t is not None else set())):
            s = sims[t]
            on = synth.render_frame(scene, s.pose, s.state, marks=True, background=bg).values
            off = synth.render_frame(scene, s.pose, s.state, marks=False, background=bg).values
            if t in keep:
                rows.append({
                    "thermal": pool_image(on), "ablated": pool_image(off), "current": s.pose.joints,
                    "past": poses[t - OFFSET].joints, "clip_id": f"synth_{i:04d}", "t": t,
                })
            if t == sweep_t:
                mask = _recent_mark(on, off, s.pose)
                if mask is not None:
                    scenes.append(SweepScene(on, off, mask, s.pose.joints.copy()))
    return _tables(rows), scenes


# ---------------------------------------------------------------- runner


def rank_correlation(x, y) -> float:
    """Spearman correlation, exact for untied data.

    Without ties it is the rational ``1 - 6 sum(d^2) / (n (n^2 - 1))``, so a
    four-point curve with one adjacent swap gives exactly -0.8 instead of a
    float-rounded neighbour.
    """
    rx, ry = rankdata(x), rankdata(y)
    if len(set(rx)) < len(rx) or len(set(ry)) < len(ry):
        return float(spearmanr(x, y).statistic)
    n = len(rx)
    d2 = int(sum((int(a) - int(b)) ** 2 for a, b in zip(rx, ry)))
    return float(1 - Fraction(6 * d2, n * (n * n - 1)))


def _json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


class Benchmark:
    """Runs (or reloads from ``cache``) every stage of the synthetic experiment."""

    def __init__(self, cfg: BenchmarkConfig, cache: Path):
        self.cfg = cfg
        self.root = Path(cache) / f"bench_{cfg.digest()}"
        self.root.mkdir(parents=True, exist_ok=True)
        _json(self.root / "config.json", cfg.to_json())
        self.timings: dict[str, float] = {}

    def _timed(self, name, fn):
        t0 = time.time()
        out = fn()
        self.timings[name] = self.timings.get(name, 0.0) + time.time() - t0
        # persisted so cached reruns still report what each stage cost
        path = self.root / "timings.json"
        saved = json.loads(path.read_text()) if path.exists() else {}
        saved[name] = self.timings[name]
        _json(path, saved)
        return out

    def recorded_timings(self) -> dict[str, float]:
        path = self.root / "timings.json"
        return json.loads(path.read_text()) if path.exists() else {}

    # data ------------------------------------------------------------
    def data(self):
        if hasattr(self, "_data"):
            return self._data
        files = {f"{s}_{c}": self.root / f"{s}_{c}.npz" for s in ("train", "test") for c in CONDITIONS}
        sweep_file = self.root / "sweep.npz"
        if all(f.exists() for f in files.values()) and sweep_file.exists():
            tables = {k: PairTable.load(f) for k, f in files.items()}
            d = np.load(sweep_file)
            scenes = [SweepScene(*a) for a in zip(d["image"], d["background"], d["mask"], d["current"])]
        else:
            def build():
                train, _ = simulate_split(self.cfg, 0, self.cfg.n_train, self.cfg.train_stride)
                test, scenes = simulate_split(self.cfg, self.cfg.n_train, self.cfg.n_test, self.cfg.test_stride, sweep=True)
                return train, test, scenes
            train, test, scenes = self._timed("simulate", build)
            tables = {f"train_{c}": train[c] for c in CONDITIONS} | {f"test_{c}": test[c] for c in CONDITIONS}
            for k, t in tables.items():
                t.save(files[k])
            np.savez_compressed(
                sweep_file, image=np.stack([s.image for s in scenes]), background=np.stack([s.background for s in scenes]),
                mask=np.stack([s.mask for s in scenes]), current=np.stack([s.current for s in scenes]),
            )
        vocab = self.vocab(tables["train_thermal"])
        tables = {k: t.with_types(vocab) for k, t in tables.items()}
        self._data = (tables, scenes, vocab)
        return self._data

    def vocab(self, train: PairTable) -> PoseTypeVocabulary:
        path = self.root / "vocab.json"
        if path.exists():
            return PoseTypeVocabulary.load(path)
        vecs = poses_to_vectors([Pose2D(p) for p in train.past])
        vocab = self._timed("vocab", lambda: build_vocabulary(vecs, k=self.cfg.k, seed=self.cfg.vocab_seed))
        vocab.save(path)
        return vocab

    # models ----------------------------------------------------------
    def model(self, cond: str, module: str):
        stem = self.root / cond / module
        if stem.with_suffix(".pt").exists():
            return load_checkpoint(stem.with_suffix(".pt"))[0]
        tables, _, vocab = self.data()
        cfg = self.cfg.train_config(module)
        res = self._timed(f"train_{cond}_{module}", lambda: train_module(module, tables[f"train_{cond}"], vocab, cfg, out_dir=self.root / cond))
        log.info("%s/%s loss %.3f -> %.3f", cond, module, res.initial_loss, res.final_loss)
        return res.model

    def pipeline(self, cond: str) -> PipelinePredictor:
        _, _, vocab = self.data()
        return PipelinePredictor(self.model(cond, "goal"), self.model(cond, "type"), self.model(cond, "pose"), vocab, self.cfg.topk)

    def semantic(self) -> SemanticClassifier:
        stem = self.root / "semantic"
        cfg = self.cfg.train_config("semantic")
        tables, _, _ = self.data()
        heldout = make_semantic_dataset(tables["test_thermal"], seed=self.cfg.seed + 1)
        if stem.with_suffix(".pt").exists():
            model, side = load_checkpoint(stem.with_suffix(".pt"))
            clf = SemanticClassifier(model, train_accuracy=side.get("train_accuracy", float("nan")))
            clf.test_accuracy = clf.accuracy(heldout)
            return clf
        train = make_semantic_dataset(tables["train_thermal"], seed=self.cfg.seed)
        clf = self._timed("train_semantic", lambda: train_semantic(train, cfg, heldout))
        save_checkpoint(clf.model, stem, "semantic", cfg, final_loss=clf.loss_curve[-1])
        side = json.loads(stem.with_suffix(".json").read_text())
        side["train_accuracy"] = clf.train_accuracy
        side["test_accuracy"] = clf.test_accuracy
        _json(stem.with_suffix(".json"), side)
        return clf

    # evaluation ------------------------------------------------------
    def report(self, method: str) -> dict:
        """Summary of ``ours_thermal``, ``ours_ablated`` or ``knn`` on its test split."""
        path = self.root / "reports" / f"{method}.json"
        if path.exists():
            return json.loads(path.read_text())
        tables, _, vocab = self.data()
        if method == "knn":
            pool = knn_baseline_build(tables["train_thermal"], stride=self.cfg.knn_stride)
            predictor, test, sem = KnnPredictor(pool), tables["test_thermal"], None
        else:
            cond = method.split("_", 1)[1]
            predictor, test = self.pipeline(cond), tables[f"test_{cond}"]
            sem = self.semantic() if cond == "thermal" else None
        rep: MetricsReport = self._timed(
            f"eval_{method}", lambda: evaluate(predictor, vocab, test, self.cfg.M, self.cfg.eval_seed, semantic=sem, config_hash=self.cfg.digest())
        )
        rep.method = method
        rep.save(path.with_suffix(""))
        return json.loads(path.read_text())

    def sweep(self) -> dict:
        path = self.root / "reports" / "sweep.json"
        if path.exists():
            return json.loads(path.read_text())
        _, scenes, _ = self.data()
        goal = self.model("thermal", "goal")
        curves = self._timed("sweep", lambda: [
            [d for _, d in intensity_sweep(goal, s.image, Pose2D(s.current), s.mask, self.cfg.sweep_scales, background=s.background)]
            for s in scenes
        ])
        curves = np.asarray(curves)
        mean = curves.mean(axis=0)
        rho = rank_correlation(self.cfg.sweep_scales, mean)
        out = {
            "scales": list(self.cfg.sweep_scales), "n_scenes": len(scenes), "mean_distance": mean.tolist(),
            "spearman": rho, "per_scene": curves.tolist(),
            "closer_at_full_than_quarter": float(np.mean(curves[:, -1] < curves[:, 0])),
        }
        path.parent.mkdir(exist_ok=True)
        _json(path, out)
        return out

    def summary(self) -> dict:
        out = {
            "ours_thermal": self.report("ours_thermal"),
            "ours_ablated": self.report("ours_ablated"),
            "knn": self.report("knn"),
            "sweep": self.sweep(),
        }
        clf = self.semantic()
        out["semantic_accuracy"] = clf.test_accuracy
        out["timings"] = self.recorded_timings()
        _json(self.root / "summary.json", {k: v for k, v in out.items()})
        return out


def run_benchmark(cfg: BenchmarkConfig | None = None, cache=None) -> dict:
    torch.set_num_threads(max(1, torch.get_num_threads()))
    cfg = cfg or BenchmarkConfig()
    if cache is None:
        import tempfile

        cache = tempfile.mkdtemp(prefix="thermal_past_bench_")
    return Benchmark(cfg, Path(cache)).summary()
