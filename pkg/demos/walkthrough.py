"""Library walkthrough: simulate rooms, train small stage models, sample past poses.

Runs in a few minutes on one CPU core. Figures and JSON go to ``--out``.

    python demos/walkthrough.py --out runs/walkthrough
"""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

import torch

from thermal_past.benchmark import _recent_mark
from thermal_past.dataset import PairTable, make_pairs
from thermal_past.eval import evaluate, intensity_sweep
from thermal_past.models import NetConfig, TrainConfig, train_module
from thermal_past.pipeline import KnnPredictor, PipelinePredictor, infer_past, knn_baseline_build
from thermal_past.plots import overlay_hypotheses, plot_sweep
from thermal_past.pose import Pose2D
from thermal_past.synth import generate_scene, iter_simulation, render_frame, script_episode, simulate_clip
from thermal_past.vocabulary import build_vocabulary, poses_to_vectors

log = logging.getLogger("walkthrough")


def clips_to_table(seeds, duration_s=30.0):
    tables = []
    for s in seeds:
        clip = simulate_clip(generate_scene(s), s, duration_s, clip_id=f"room_{s}")
        tables.append(PairTable.from_pairs(make_pairs(clip, stride=5)))
    return PairTable.concat(tables)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/walkthrough")
    ap.add_argument("--train-clips", type=int, default=12)
    ap.add_argument("--iterations", type=int, default=300)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    # 1. pairs: the frame at t, the pose at t and the pose 3 s earlier
    train = clips_to_table(range(100, 100 + args.train_clips))
    test = clips_to_table(range(900, 903))
    log.info("%d train pairs, %d test pairs", len(train), len(test))

    # 2. pose types from torso-aligned past poses
    vocab = build_vocabulary(poses_to_vectors([Pose2D(p) for p in train.past]), k=16, seed=0)
    train, test = train.with_types(vocab), test.with_types(vocab)

    # 3. the three stages, trained separately on ground-truth conditioning
    models = {}
    for module in ("goal", "type", "pose"):
        cfg = TrainConfig.desk(module, iterations=args.iterations, net=NetConfig.desk())
        res = train_module(module, train, vocab, cfg)
        log.info("%s loss %.3f -> %.3f", module, res.initial_loss, res.final_loss)
        models[module] = res.model

    # 4. thirty sampled hypotheses for one held-out frame
    pipe = PipelinePredictor(models["goal"], models["type"], models["pose"], vocab)
    row = test.row(len(test) // 2)
    res = infer_past(pipe.goal, pipe.type_m, pipe.pose_m, vocab, row.image, row.current_pose, seed=0)
    res.save(out / "hypotheses.json")
    overlay_hypotheses(row.image, row.current_pose, res, out / "hypotheses.png", truth=row.past_pose)

    # 5. compare with nearest-neighbour retrieval on the same pairs
    for name, predictor in (("ours", pipe), ("knn", KnnPredictor(knn_baseline_build(train, stride=3)))):
        rep = evaluate(predictor, vocab, test, M=30)
        log.info("%-4s top-1 %.1f  top-5 %.1f px", name, rep.mpjpe_top1, rep.mpjpe_top5)

    # 6. fade a fresh mark and watch the expected goal-to-mark distance
    scene = generate_scene(903)
    sims = list(iter_simulation(scene, script_episode(scene, 903, 30.0), jitter=0.8, seed=903))
    for sf in sims[150:]:
        on = render_frame(scene, sf.pose, sf.state).values
        off = render_frame(scene, sf.pose, sf.state, marks=False).values
        mask = _recent_mark(on, off, sf.pose)
        if mask is not None:
            rows = intensity_sweep(pipe.goal, on, sf.pose, mask, [0.0, 0.25, 0.5, 0.75, 1.0], background=off)
            plot_sweep(rows, out / "sweep.png", title=f"frame {sf.index}")
            log.info("sweep at frame %d: %s", sf.index, [round(d, 1) for _, d in rows])
            break
    log.info("figures in %s", out)


if __name__ == "__main__":
    main()
