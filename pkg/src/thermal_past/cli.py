"""Command-line entry point: synth, build-vocab, train, infer, eval, intensity-sweep, benchmark.

Every command reads one YAML key-value file (``--config``) plus ``--set key.sub=value``
overrides, and writes a manifest with the config hash and all seeds under
``<output_dir>/manifests``. ``THERMAL_PAST_OUTPUT`` overrides ``output_dir``.

Exit codes: 0 success, 2 config error, 3 data error, 4 skipped-sample threshold exceeded.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from . import __version__
from .dataset import PairTable, SplitManifest, list_clips, load_clip, make_pairs, split_by_clip
from .errors import ClipFormatError, ConfigError, DataError, ParameterError, SkippedSamplesError

log = logging.getLogger("thermal_past")

OUTPUT_ENV = "THERMAL_PAST_OUTPUT"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_SKIPPED = 0, 2, 3, 4
MODULES = ("goal", "type", "pose", "semantic", "heatmap-baseline")
METHODS = ("ours", "knn", "heatmap-baseline", "oracle")

DEFAULTS: dict = {
    "data_root": "data",
    "output_dir": "runs/default",
    "split": {"seed": 0, "ratios": [0.8, 0.1, 0.1]},
    "synth": {"n_clips": 20, "duration_s": 30.0, "tau": 20.0, "seed": 0, "thermal_marks": True, "jitter": 0.8},
    "pairs": {"stride": 5, "offset": 45},
    "vocab": {"k": 200, "seed": 0},
    "train": {
        "scale": "full",  # full (real data) or desk (CPU-sized nets and rates)
        "seed": 0,
        # per-module TrainConfig field overrides; a nested "net" maps to NetConfig fields
        "goal": {}, "type": {}, "pose": {}, "semantic": {}, "heatmap": {},
    },
    "inference": {"M": 30, "topk": 5, "seed": 0},
    "eval": {"max_skip_fraction": 0.01, "knn_stride": 3, "heatmap_subsample": 0.005, "semantic": True},
    "sweep": {"scales": [0.0, 0.25, 0.5, 0.75, 1.0]},
}


# ---------------------------------------------------------------- configuration


def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict) and base[key] and not isinstance(value, dict):
            raise ConfigError(f"config key {path!r} must be a mapping")
        if isinstance(base[key], dict) and base[key]:
            out[key] = _merge(base[key], value, path + ".")
        elif isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be a mapping")
            out[key] = copy.deepcopy(value)  # free-form override block
        else:
            out[key] = value
    return out


def _override(pair: str) -> dict:
    if "=" not in pair:
        raise ConfigError(f"override {pair!r} is not key=value")
    key, raw = pair.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override {pair!r}: {exc}") from exc
    for part in reversed(key.strip().split(".")):
        value = {part: value}
    return value


def load_config(path=None, overrides=(), env=None) -> dict:
    """Defaults, then the YAML file, then ``key.sub=value`` overrides, then the output env var."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        try:
            doc = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{p} must hold a mapping at the top level")
        cfg = _merge(cfg, doc)
    for pair in overrides:
        cfg = _merge(cfg, _override(pair))
    env = os.environ if env is None else env
    if env.get(OUTPUT_ENV):
        cfg["output_dir"] = env[OUTPUT_ENV]
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    if cfg["train"]["scale"] not in ("desk", "full"):
        raise ConfigError(f"train.scale must be desk or full, got {cfg['train']['scale']!r}")
    ratios = cfg["split"]["ratios"]
    if len(ratios) != 3 or abs(sum(ratios) - 1) > 1e-9 or min(ratios) < 0:
        raise ConfigError(f"split.ratios must be three non-negative numbers summing to 1, got {ratios}")
    for key in ("M", "topk"):
        if not isinstance(cfg["inference"][key], int) or cfg["inference"][key] < 1:
            raise ConfigError(f"inference.{key} must be a positive integer")
    if not isinstance(cfg["vocab"]["k"], int) or cfg["vocab"]["k"] < 1:
        raise ConfigError("vocab.k must be a positive integer")
    if cfg["pairs"]["stride"] < 1 or cfg["pairs"]["offset"] < 1:
        raise ConfigError("pairs.stride and pairs.offset must be positive")


def config_hash(cfg: dict) -> str:
    # the output location does not change any artifact's content
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


def seeds(cfg: dict) -> dict:
    return {
        "synth": cfg["synth"]["seed"], "split": cfg["split"]["seed"], "vocab": cfg["vocab"]["seed"],
        "train": cfg["train"]["seed"], "inference": cfg["inference"]["seed"],
    }


def train_config(cfg: dict, module: str):
    from .models import NetConfig, TrainConfig

    over = copy.deepcopy(cfg["train"].get(module, {}))
    net_over = over.pop("net", {})
    full = cfg["train"]["scale"] == "full"
    base_net = NetConfig.full() if full else NetConfig.desk()
    try:
        net = dataclasses.replace(base_net, **{k: tuple(v) if isinstance(v, list) else v for k, v in net_over.items()})
        if "crop_scale" in over:
            over["crop_scale"] = tuple(over["crop_scale"])
        over.setdefault("seed", cfg["train"]["seed"])
        return (TrainConfig.full if full else TrainConfig.desk)(module, net=net, **over)
    except (TypeError, ParameterError) as exc:
        raise ConfigError(f"train.{module}: {exc}") from exc


# ---------------------------------------------------------------- run context


class Run:
    """Resolved paths and the manifest writer shared by every command."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.data_root = Path(cfg["data_root"])
        self.out = Path(cfg["output_dir"])
        self.hash = config_hash(cfg)
        self.outputs: list[str] = []
        self.inputs: dict = {}

    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def produced(self, *paths) -> None:
        for p in paths:
            p = Path(p)
            self.outputs.append(str(p.relative_to(self.out)) if p.is_relative_to(self.out) else str(p))

    def manifest(self, command: str, extra: dict | None = None) -> Path:
        doc = {
            "command": command, "config_hash": self.hash, "seeds": seeds(self.cfg), "config": self.cfg,
            "inputs": self.inputs, "outputs": sorted(self.outputs), "version": __version__,
        }
        doc.update(extra or {})
        path = self.path("manifests", f"{command}.json")
        path.write_text(json.dumps(doc, indent=2, sort_keys=True))
        return path

    # data ------------------------------------------------------------
    def splits(self) -> SplitManifest:
        f = self.data_root / "splits.json"
        if f.exists():
            return SplitManifest.load(f)
        if not (self.data_root / "clips").is_dir():
            raise DataError(f"no clips under {self.data_root}; run synth or point data_root at a dataset")
        ids = list_clips(self.data_root)
        try:
            return split_by_clip(ids, tuple(self.cfg["split"]["ratios"]), self.cfg["split"]["seed"])
        except ParameterError as exc:
            raise DataError(str(exc)) from exc

    def clip_dir(self, clip_id: str) -> Path:
        d = self.data_root / "clips" / clip_id
        if not d.is_dir():
            raise DataError(f"clip {clip_id!r} not found under {self.data_root / 'clips'}")
        return d

    def table(self, split: str, vocab=None) -> PairTable:
        ids = getattr(self.splits(), split)
        tables = []
        for cid in ids:
            clip = load_clip(self.clip_dir(cid))
            pairs = make_pairs(clip, offset=self.cfg["pairs"]["offset"], stride=self.cfg["pairs"]["stride"])
            if pairs:
                tables.append(PairTable.from_pairs(pairs))
        if not tables:
            raise DataError(f"the {split} split yields no pairs")
        table = PairTable.concat(tables)
        if vocab is not None:
            table = table.with_types(vocab)
        self.inputs[f"{split}_pairs"] = len(table)
        self.inputs[f"{split}_data_hash"] = table.digest()
        return table

    def vocab(self):
        from .vocabulary import PoseTypeVocabulary

        f = self.out / "vocab.json"
        if not f.exists():
            raise DataError(f"{f} missing; run build-vocab first")
        v = PoseTypeVocabulary.load(f)
        self.inputs["vocab_hash"] = v.digest()
        return v

    def checkpoint(self, name: str):
        from .models import load_checkpoint

        f = self.out / "checkpoints" / f"{name}.pt"
        if not f.exists():
            raise DataError(f"{f} missing; run train --module {name} first")
        model, side = load_checkpoint(f)
        self.inputs[f"{name}_checkpoint"] = hashlib.sha256(f.read_bytes()).hexdigest()[:16]
        return model, side


# ---------------------------------------------------------------- commands


def cmd_synth(run: Run, args) -> int:
    from .synth import SynthConfig, generate_dataset

    s = run.cfg["synth"]
    sc = SynthConfig(
        n_clips=s["n_clips"], duration_s=float(s["duration_s"]), tau=float(s["tau"]), seed=s["seed"],
        thermal_marks=bool(s["thermal_marks"]), ratios=tuple(run.cfg["split"]["ratios"]), jitter=float(s["jitter"]),
    )
    try:
        manifest = generate_dataset(run.data_root, sc)
    except ParameterError as exc:
        raise ConfigError(str(exc)) from exc
    run.inputs["clips"] = manifest.train + manifest.val + manifest.test
    run.outputs += [str(run.data_root / "splits.json"), str(run.data_root / "clips")]
    log.info("wrote %d clips to %s", s["n_clips"], run.data_root)
    run.manifest("synth")
    return EXIT_OK


def cmd_build_vocab(run: Run, args) -> int:
    from .pose import Pose2D
    from .vocabulary import build_vocabulary, poses_to_vectors

    table = run.table("train")
    try:
        vocab = build_vocabulary(poses_to_vectors([Pose2D(p) for p in table.past]), k=run.cfg["vocab"]["k"], seed=run.cfg["vocab"]["seed"])
    except ParameterError as exc:
        raise ConfigError(f"vocab: {exc}") from exc
    path = run.path("vocab.json")
    vocab.save(path)
    run.produced(path)
    log.info("vocabulary with %d types from %d train pairs", vocab.k, len(table))
    run.manifest("build-vocab", {"vocab_hash": vocab.digest()})
    return EXIT_OK


def cmd_train(run: Run, args) -> int:
    from .models import save_checkpoint, train_module, write_loss_curve

    module = "heatmap" if args.module == "heatmap-baseline" else args.module
    tc = train_config(run.cfg, module)
    vocab = run.vocab() if module in ("type", "pose") else None
    ckpt_dir = run.out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    if module == "semantic":
        from .eval import make_semantic_dataset, train_semantic

        seed = run.cfg["train"]["seed"]
        train = make_semantic_dataset(run.table("train"), seed=seed)
        heldout = make_semantic_dataset(run.table("val"), seed=seed + 1) if run.splits().val else None
        clf = train_semantic(train, tc, heldout)
        pt = save_checkpoint(clf.model, ckpt_dir / "semantic", "semantic", tc, data_hash=run.inputs["train_data_hash"],
                             final_loss=float(clf.loss_curve[-1]))
        side = json.loads(pt.with_suffix(".json").read_text())
        side.update(train_accuracy=clf.train_accuracy, heldout_accuracy=clf.test_accuracy)
        pt.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True))
        write_loss_curve(ckpt_dir / "semantic_loss.csv", clf.loss_curve)
        log.info("semantic accuracy train %.3f held-out %.3f", clf.train_accuracy, clf.test_accuracy)
        extra = {"train_accuracy": clf.train_accuracy, "heldout_accuracy": clf.test_accuracy}
    else:
        res = train_module(module, run.table("train", vocab), vocab, tc, out_dir=ckpt_dir)
        log.info("%s loss %.4f -> %.4f", module, res.initial_loss, res.final_loss)
        pt = res.checkpoint
        extra = {"initial_loss": res.initial_loss, "final_loss": res.final_loss}
    run.produced(pt, pt.with_suffix(".json"), ckpt_dir / f"{module}_loss.csv")
    run.manifest(f"train-{module}", extra)
    return EXIT_OK


def _frame(run: Run, clip_id: str, frame: int):
    clip = load_clip(run.clip_dir(clip_id))
    if not 0 <= frame < len(clip):
        raise DataError(f"frame {frame} outside clip {clip_id!r} of {len(clip)} frames")
    p = clip.poses[frame]
    if not p.valid.all():
        raise DataError(f"pose at frame {frame} of {clip_id!r} has invalid joints")
    return clip, p


def _pipeline(run: Run):
    from .pipeline import PipelinePredictor

    vocab = run.vocab()
    models = [run.checkpoint(m)[0] for m in ("goal", "type", "pose")]
    try:
        return PipelinePredictor(*models, vocab, topk=run.cfg["inference"]["topk"])
    except ParameterError as exc:
        raise DataError(f"checkpoints do not fit together: {exc}") from exc


def cmd_infer(run: Run, args) -> int:
    from .pipeline import infer_past

    clip, p = _frame(run, args.clip, args.frame)
    pipe = _pipeline(run)
    inf = run.cfg["inference"]
    res = infer_past(pipe.goal, pipe.type_m, pipe.pose_m, pipe.vocab, clip.frames[args.frame], p,
                     M=inf["M"], topk=inf["topk"], seed=inf["seed"])
    stem = f"{args.clip}_{args.frame:06d}"
    js = run.path("infer", f"{stem}.json")
    res.save(js)
    offset = run.cfg["pairs"]["offset"]
    truth = clip.poses[args.frame - offset] if args.frame >= offset else None
    png = run.path("infer", f"{stem}.png")
    from .plots import overlay_hypotheses

    overlay_hypotheses(clip.frames[args.frame].values, p, res, png, truth=truth)
    run.produced(js, png)
    run.manifest("infer", {"clip": args.clip, "frame": args.frame})
    return EXIT_OK


def cmd_eval(run: Run, args) -> int:
    from .eval import SemanticClassifier, evaluate
    from .pipeline import HeatmapBaselinePredictor, KnnPredictor, OraclePredictor, knn_baseline_build

    method, ev = args.method, run.cfg["eval"]
    vocab = None
    if method == "oracle":
        predictor = OraclePredictor()
    elif method == "ours":
        predictor = _pipeline(run)
        vocab = predictor.vocab
    elif method == "knn":
        predictor = KnnPredictor(knn_baseline_build(run.table("train"), stride=ev["knn_stride"]))
    else:
        model, _ = run.checkpoint("heatmap")
        predictor = HeatmapBaselinePredictor(model, run.table("train").past, subsample=ev["heatmap_subsample"])
    semantic = None
    if method == "ours" and ev["semantic"] and (run.out / "checkpoints" / "semantic.pt").exists():
        semantic = SemanticClassifier(run.checkpoint("semantic")[0])
    test = run.table("test", vocab)
    inf = run.cfg["inference"]
    stem = run.path("reports", method)
    try:
        report = evaluate(predictor, vocab, test, M=inf["M"], seed=inf["seed"], semantic=semantic,
                          config_hash=run.hash, max_skip_fraction=ev["max_skip_fraction"])
        code = EXIT_OK
    except SkippedSamplesError as exc:
        report, code = exc.report, EXIT_SKIPPED
        log.error("%s", exc)
    report.method = method
    run.produced(*report.save(stem))
    log.info("%s: %s", method, json.dumps(report.summary(), sort_keys=True))
    run.manifest(f"eval-{method}", {"summary": report.summary(), "exit_code": code})
    return code


def sweep_region(run: Run, clip, frame: int, box):
    """Image, mark mask or box, and background for the sweep.

    With no box the clip must be synthetic: the frame is re-simulated with and
    without marks and the most recent visible mark becomes the region.
    """
    if box is not None:
        return clip.frames[frame].values, tuple(box), None
    from . import synth
    from .benchmark import _recent_mark

    meta = clip.meta
    if "scene" not in meta or "script" not in meta:
        raise DataError(f"clip {clip.clip_id!r} is not synthetic; pass --box x0,y0,x1,y1")
    scene = synth.SceneSpec.from_json(meta["scene"])
    script = synth.script_episode(scene, meta["seed"], len(clip) / clip.fps, clip.fps)
    bg = synth.scene_background(scene)
    for sf in synth.iter_simulation(scene, script, meta["tau"], clip.fps, meta.get("jitter", 0.8), meta["seed"]):
        if sf.index == frame:
            on = synth.render_frame(scene, sf.pose, sf.state, marks=True, background=bg).values
            off = synth.render_frame(scene, sf.pose, sf.state, marks=False, background=bg).values
            mask = _recent_mark(on, off, sf.pose)
            if mask is None:
                raise DataError(f"no visible mark at frame {frame} of {clip.clip_id!r}; pass --box")
            return on, mask, off
    raise DataError(f"frame {frame} not reached when replaying {clip.clip_id!r}")


def cmd_intensity_sweep(run: Run, args) -> int:
    from .eval import intensity_sweep
    from .plots import plot_sweep

    clip, p = _frame(run, args.clip, args.frame)
    scales = args.scales if args.scales is not None else run.cfg["sweep"]["scales"]
    if not scales or any(not float(s) >= 0 for s in scales):
        raise ConfigError(f"scales must be non-negative, got {scales}")
    image, region, background = sweep_region(run, clip, args.frame, args.box)
    goal, _ = run.checkpoint("goal")
    rows = intensity_sweep(goal, image, p, region, [float(s) for s in scales], background=background)
    stem = f"{args.clip}_{args.frame:06d}"
    csv_path = run.path("sweep", f"{stem}.csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scale", "expected_distance"])
        for s, d in rows:
            w.writerow([repr(s), repr(d)])
    png = run.path("sweep", f"{stem}.png")
    plot_sweep(rows, png, title=f"{args.clip} frame {args.frame}")
    run.produced(csv_path, png)
    run.manifest("intensity-sweep", {"clip": args.clip, "frame": args.frame, "rows": rows})
    return EXIT_OK


def cmd_benchmark(run: Run, args) -> int:
    from .benchmark import BenchmarkConfig, run_benchmark

    bc = BenchmarkConfig(n_train=args.n_train, n_test=args.n_test)
    summary = run_benchmark(bc, cache=args.cache or run.out / "benchmark")
    path = run.path("benchmark_summary.json")
    path.write_text(json.dumps(summary, indent=2, sort_keys=True, default=float))
    run.produced(path)
    run.manifest("benchmark", {"benchmark_config": bc.to_json()})
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _box(text: str) -> tuple[int, int, int, int]:
    vals = _floats(text)
    if len(vals) != 4:
        raise argparse.ArgumentTypeError("box needs x0,y0,x1,y1")
    return tuple(int(v) for v in vals)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="YAML key-value config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. vocab.k=32 (repeatable)")
    common.add_argument("--verbose", "-v", action="store_true")
    parser = argparse.ArgumentParser(prog="thermal-past", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="simulate synthetic clips and splits.json")
    sub.add_parser("build-vocab", parents=[common], help="cluster train past poses into pose types")
    p = sub.add_parser("train", parents=[common], help="train one module")
    p.add_argument("--module", required=True, choices=MODULES)
    for name, helptext in (("infer", "sample past poses for one frame"), ("intensity-sweep", "scale a mark and track the goal")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--clip", required=True)
        p.add_argument("--frame", required=True, type=int)
        if name == "intensity-sweep":
            p.add_argument("--scales", type=_floats, help="comma-separated scales (default from config)")
            p.add_argument("--box", type=_box, help="mark region x0,y0,x1,y1 in pixels")
    p = sub.add_parser("eval", parents=[common], help="evaluate a method on the test split")
    p.add_argument("--method", required=True, choices=METHODS)
    p = sub.add_parser("benchmark", parents=[common], help="thermal vs ablated synthetic benchmark")
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=40)
    p.add_argument("--cache", help="stage cache directory (default <output_dir>/benchmark)")
    return parser


COMMANDS = {
    "synth": cmd_synth, "build-vocab": cmd_build_vocab, "train": cmd_train, "infer": cmd_infer,
    "eval": cmd_eval, "intensity-sweep": cmd_intensity_sweep, "benchmark": cmd_benchmark,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        run = Run(load_config(args.config, args.overrides))
        run.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](run, args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, ClipFormatError) as exc:
        frame = getattr(exc, "frame", None)
        log.error("data error: %s%s", exc, f" (frame {frame})" if frame is not None else "")
        return EXIT_DATA
    except SkippedSamplesError as exc:
        log.error("%s", exc)
        return EXIT_SKIPPED


if __name__ == "__main__":
    sys.exit(main())
