"""Acceptance suite: one PASS/FAIL line per criterion is printed at the end of the run.

Criteria 7-9 and 11 and the trained-model examples read a fixed-seed synthetic
benchmark (200 train / 40 test clips). Stages are cached under
``THERMAL_PAST_CACHE`` (default ``.cache/benchmark``); a cold cache trains
everything, which takes roughly an hour on one CPU core.
"""

from __future__ import annotations

import math
import time

import numpy as np
import pytest
import torch
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare, spearmanr

from thermal_past.benchmark import rank_correlation
from thermal_past.cli import main
from thermal_past.dataset import Extrinsics, triangulate_scales
from thermal_past.eval import evaluate, make_semantic_dataset, topk_errors
from thermal_past.models import TrainConfig, predict_goal, predict_pose, predict_type, train_module
from thermal_past.models.losses import class_nll, grid_nll
from thermal_past.models.networks import spatial_log_softmax
from thermal_past.models.training import module_losses, painted_centers
from thermal_past.pipeline import infer_past
from thermal_past.pose import (
    GRID_CELLS, GRID_H, GRID_W, IMAGE_H, IMAGE_W, J, NON_TORSO, TORSO, HeatmapGrid, Pose2D, cell_to_pixel,
    decode_argmax, mpjpe, pixel_to_cell, render_heatmap, sample_cells, topk_mpjpe,
)
from thermal_past.vocabulary import VECTOR_DIM, assign_types, build_vocabulary, center_pose

criterion = pytest.mark.criterion


# ---------------------------------------------------------------- 1. metrics


def _mpjpe_loop(pred, gt, valid):
    total, n = 0.0, 0
    for j in range(J):
        if valid[j]:
            total += math.sqrt((pred[j][0] - gt[j][0]) ** 2 + (pred[j][1] - gt[j][1]) ** 2)
            n += 1
    return total / n


def _topk_loop(preds, gt, valid, k):
    errs = sorted(_mpjpe_loop(p, gt, valid) for p in preds)
    return sum(errs[:k]) / k


@criterion(1, "metric correctness")
def test_c1_metrics_match_scalar_oracles():
    t0 = time.time()
    rng = np.random.default_rng(101)
    for _ in range(1000):
        valid = rng.random(J) > 0.2
        valid[TORSO] = True
        gt = Pose2D(rng.uniform(0, [IMAGE_W, IMAGE_H], (J, 2)), valid)
        preds = [Pose2D(rng.uniform(0, [IMAGE_W, IMAGE_H], (J, 2))) for _ in range(6)]
        got = mpjpe(preds[0], gt)
        want = _mpjpe_loop(preds[0].joints, gt.joints, valid)
        assert abs(got - want) <= 1e-9 * want
        tk = [topk_mpjpe(preds, gt, k) for k in (1, 3, 5)]
        for k, v in zip((1, 3, 5), tk):
            w = _topk_loop([p.joints for p in preds], gt.joints, valid, k)
            assert abs(v - w) <= 1e-9 * w
        assert tk[0] <= tk[1] <= tk[2]
        assert np.allclose(topk_errors(preds, gt), tk, rtol=1e-9, atol=0)
        # quarter-pixel coordinates and integer shifts keep every operation exact
        a = np.round(rng.uniform(0, 400, (J, 2)) * 4) / 4
        b = np.round(rng.uniform(0, 400, (J, 2)) * 4) / 4
        shift = rng.integers(-500, 500, 2).astype(np.float64)
        assert mpjpe(Pose2D(a + shift), Pose2D(b + shift)) == mpjpe(Pose2D(a), Pose2D(b))
    assert time.time() - t0 < 60


# ---------------------------------------------------------------- 2. heatmap codec


@criterion(2, "heatmap codec")
def test_c2_codec_roundtrip_normalization_and_sampling():
    rng = np.random.default_rng(202)
    pts = rng.uniform([0, 0], [IMAGE_W, IMAGE_H], (100, 2))
    h = render_heatmap(pts)
    assert h.values.shape == (100, GRID_H, GRID_W)
    sums = h.values.reshape(100, -1).sum(axis=1)
    assert np.all(np.abs(sums - 1.0) <= 1e-5)
    decoded, degenerate = decode_argmax(h)
    assert not degenerate.any()
    assert np.max(np.linalg.norm(decoded - pts, axis=1)) <= 4.0
    p = rng.random(GRID_CELLS) + 0.5
    p /= p.sum()
    idx = sample_cells(HeatmapGrid(p.reshape(1, GRID_H, GRID_W)), 7, size=100_000)
    counts = np.bincount(idx, minlength=GRID_CELLS)
    assert chisquare(counts, p * 100_000).pvalue > 0.01


# ---------------------------------------------------------------- 3. losses


def _fd_rel_error(loss, scores, eps=1e-6):
    t = torch.tensor(scores, dtype=torch.float64, requires_grad=True)
    loss(t).backward()
    num = np.zeros_like(scores)
    for i in np.ndindex(scores.shape):
        up, dn = scores.copy(), scores.copy()
        up[i] += eps
        dn[i] -= eps
        num[i] = (float(loss(torch.tensor(up))) - float(loss(torch.tensor(dn)))) / (2 * eps)
    return np.linalg.norm(t.grad.numpy() - num) / np.linalg.norm(num)


@criterion(3, "loss values and gradients")
def test_c3_uniform_losses_and_finite_differences():
    t0 = time.time()
    flat = torch.zeros(3, 1, GRID_H, GRID_W, dtype=torch.float64)
    cells = torch.tensor([[[0, 0]], [[35, 50]], [[71, 95]]])
    assert torch.all((grid_nll(spatial_log_softmax(flat), cells) - math.log(6912)).abs() <= 1e-6)
    for k in (2, 32, 200):
        logp = torch.log_softmax(torch.zeros(4, k, dtype=torch.float64), dim=1)
        assert torch.all((class_nll(logp, torch.tensor([0, 1, k - 1, k // 2])) - math.log(k)).abs() <= 1e-6)
    rng = np.random.default_rng(303)
    toy_cells = torch.tensor([[[1, 2], [4, 6], [0, 0]]])
    assert _fd_rel_error(lambda s: grid_nll(spatial_log_softmax(s), toy_cells).sum(), rng.normal(0, 1, (1, 3, 5, 7))) < 1e-4
    assert _fd_rel_error(lambda s: class_nll(torch.log_softmax(s, 1), torch.tensor([2, 0])).sum(), rng.normal(0, 2, (2, 9))) < 1e-4
    assert time.time() - t0 < 60


# ---------------------------------------------------------------- 4. vocabulary


@criterion(4, "pose vocabulary")
def test_c4_vocabulary_properties():
    rng = np.random.default_rng(404)
    x = np.concatenate([rng.normal(rng.normal(0, 80, VECTOR_DIM), 8, (50, VECTOR_DIM)) for _ in range(8)])
    v = build_vocabulary(x, k=12, seed=3)
    hist = np.asarray(v.inertia_history)
    assert np.all(np.diff(hist) <= 1e-9 * hist[:-1])
    assert np.array_equal(assign_types(v.centers, v), np.arange(12))
    again = build_vocabulary(x, k=12, seed=3)
    assert np.array_equal(again.centers, v.centers)
    a, b = rng.normal(0, 40, VECTOR_DIM), rng.normal(0, 40, VECTOR_DIM)
    dup = np.concatenate([np.repeat(a[None], 6, 0), np.repeat(b[None], 9, 0)])
    rng.shuffle(dup)
    two = build_vocabulary(dup, k=2, seed=0)
    assert {tuple(c) for c in two.centers} == {tuple(a), tuple(b)} and two.inertia == 0.0


# ---------------------------------------------------------------- 5. triangulation


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    return q if np.linalg.det(q) > 0 else -q


@criterion(5, "triangulation")
def test_c5_triangulation_matches_grid_search():
    rng = np.random.default_rng(505)
    grid = np.arange(0.1, 10.0 + 1e-12, 1e-4)
    for _ in range(100):
        ext = Extrinsics(_random_rotation(rng), rng.normal(0, 1, 3), _random_rotation(rng), rng.normal(0, 1, 3))
        P = rng.normal(0, 1, (J, 3)) + [0, 0, 4]
        b_true = rng.uniform(0.3, 3.0)
        Pw = P @ ext.R1.T + ext.t1
        Qw = Pw / b_true + rng.normal(0, 0.02, (J, 3))
        q_cam = (Qw - ext.t2) @ ext.R2
        _, b = triangulate_scales(P, q_cam, ext)
        # sum of squares expanded so the whole grid is one vectorised pass
        pq, qq = float(np.sum(Pw * Qw)), float(np.sum(Qw * Qw))
        b_grid = grid[np.argmin(grid * grid * qq - 2 * grid * pq)]
        assert abs(b - b_grid) <= 1e-3
    P = rng.normal(0, 1, (J, 3))
    assert triangulate_scales(P, P) == (1.0, 1.0)
    assert triangulate_scales(P, 2 * P) == (1.0, 0.5)


# ---------------------------------------------------------------- 6. overfit


@criterion(6, "overfit smoke test")
def test_c6_each_module_overfits_eight_pairs(small_table):
    table, _ = small_table
    t0 = time.time()
    eight = table.subset(np.linspace(0, len(table) - 1, 8).astype(int))
    from thermal_past.vocabulary import poses_to_vectors

    vocab = build_vocabulary(poses_to_vectors([Pose2D(p) for p in eight.past]), k=4, seed=0)
    eight = eight.with_types(vocab)
    # 600 of the allowed 2000 iterations keeps the three runs inside the time budget
    for module in ("goal", "type", "pose"):
        nll = []
        cfg = TrainConfig.desk(module, iterations=600, batch_size=8, flip=False, crop=False, checkpoint_every=75)
        res = train_module(module, eight, vocab, cfg,
                           on_checkpoint=lambda it, m: nll.append(float(module_losses(m, module, eight, vocab).mean())))
        assert res.final_loss < 0.1 * res.initial_loss, (module, res.initial_loss, res.final_loss)
        assert len(nll) == 8
        assert all(b <= a for a, b in zip(nll, nll[1:])), (module, nll)
    assert time.time() - t0 < 15 * 60


# ---------------------------------------------------------------- 7-9. synthetic benchmark


@criterion(7, "thermal vs ablated top-5")
def test_c7_thermal_beats_ablated(bench):
    s = bench.summary()
    cfg = bench.cfg
    assert cfg.n_train >= 200 and cfg.n_test >= 40
    th, ab = s["ours_thermal"]["mpjpe_top5"], s["ours_ablated"]["mpjpe_top5"]
    print(f"top-5 MPJPE thermal {th:.2f} ablated {ab:.2f} relative gain {1 - th / ab:.3f}")
    assert th <= 0.9 * ab
    total = sum(s["timings"].values())
    print(f"recorded benchmark compute {total / 60:.1f} min")
    assert total <= 2 * 3600


@criterion(8, "ours vs KNN top-1")
def test_c8_ours_top1_not_worse_than_knn(bench):
    s = bench.summary()
    ours, knn = s["ours_thermal"]["mpjpe_top1"], s["knn"]["mpjpe_top1"]
    print(f"top-1 MPJPE ours {ours:.2f} knn {knn:.2f}")
    assert s["ours_thermal"]["n_samples"] == s["knn"]["n_samples"] > 0
    assert ours <= knn


@criterion(9, "intensity monotonicity")
def test_c9_goal_moves_toward_mark_with_intensity(bench):
    sw = bench.sweep()
    assert sw["scales"] == [0.25, 0.5, 0.75, 1.0] and sw["n_scenes"] >= 20
    rho = rank_correlation(sw["scales"], sw["mean_distance"])
    print(f"scene-averaged distances {np.round(sw['mean_distance'], 2).tolist()} spearman {rho:.3f}")
    assert abs(rho - spearmanr(sw["scales"], sw["mean_distance"]).statistic) < 1e-12
    assert rho == sw["spearman"]
    assert rho <= -0.8


@criterion(9, "intensity monotonicity")
@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=3, max_size=8, unique=True))
def test_c9_rank_correlation_matches_scipy_on_the_rank_lattice(ys):
    xs = np.arange(len(ys), dtype=float)
    rho = rank_correlation(xs, ys)
    assert abs(rho - spearmanr(xs, ys).statistic) < 1e-12
    n = len(ys)
    # untied Spearman is 1 - 6 m / (n (n^2 - 1)) for an integer m
    m = (1 - rho) * n * (n * n - 1) / 6
    assert abs(m - round(m)) < 1e-9


# ---------------------------------------------------------------- 10. inference contracts


@criterion(10, "inference contracts")
def test_c10_thirty_hypotheses_top5_types(bench):
    tables, _, vocab = bench.data()
    pipe = bench.pipeline("thermal")
    test = tables["test_thermal"]
    for i in range(0, len(test), max(1, len(test) // 25)):
        row = test.row(i)
        res = infer_past(pipe.goal, pipe.type_m, pipe.pose_m, vocab, row.image, row.current_pose, M=30, topk=5, seed=i)
        assert len(res.hypotheses) == 30
        r = np.array([h.r for h in res.hypotheses])
        lp = predict_type(pipe.type_m, np.repeat(row.image[None], 30, 0), np.repeat(row.current_pose.joints[None], 30, 0), r)
        for h, p in zip(res.hypotheses, lp):
            assert h.z in set(np.argsort(-p, kind="stable")[:5].tolist())
    sub = test.subset(np.arange(min(40, len(test))))
    assert evaluate(pipe, vocab, sub).to_json() == evaluate(pipe, vocab, sub).to_json()


@criterion(10, "inference contracts")
def test_c10_cmd_eval_reruns_byte_identical(tmp_path):
    net = {"width": 8, "depth": 2, "fine_width": 4, "cls_widths": [8, 8, 8, 8]}
    cfg = {
        "data_root": str(tmp_path / "data"), "output_dir": str(tmp_path / "out"),
        "synth": {"n_clips": 4, "duration_s": 12.0}, "split": {"ratios": [0.5, 0.25, 0.25]}, "vocab": {"k": 8},
        "train": {"scale": "desk", **{m: {"iterations": 20, "net": net} for m in ("goal", "type", "pose")}},
    }
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    c = ["-c", str(path)]
    for cmd in (["synth"], ["build-vocab"], ["train", "--module", "goal"], ["train", "--module", "type"],
                ["train", "--module", "pose"]):
        assert main(cmd + c) == 0
    assert main(["eval", "--method", "ours"] + c) == 0
    first = (tmp_path / "out" / "reports" / "ours.json").read_bytes()
    assert main(["eval", "--method", "ours"] + c) == 0
    assert (tmp_path / "out" / "reports" / "ours.json").read_bytes() == first
    assert b'"M": 30' in first


# ---------------------------------------------------------------- 11. semantic classifier


@criterion(11, "semantic classifier")
def test_c11_semantic_accuracy_and_distinct_negatives(bench):
    tables, _, _ = bench.data()
    clf = bench.semantic()
    print(f"semantic held-out accuracy {clf.test_accuracy:.3f}")
    assert clf.test_accuracy >= 0.75
    for name, seed in (("train_thermal", bench.cfg.seed), ("test_thermal", bench.cfg.seed + 1)):
        d = make_semantic_dataset(tables[name], seed=seed)
        n = len(tables[name])
        assert not np.any(np.all(d.poses[:n] == d.poses[n:], axis=(1, 2)))


# ---------------------------------------------------------------- trained-model examples


@criterion("goal-cell", "goal map beats uniform on held-out torsos")
def test_goal_probability_beats_uniform(bench):
    tables, _, _ = bench.data()
    test = tables["test_thermal"]
    logp = predict_goal(bench.model("thermal", "goal"), test.images, test.current)
    cells = pixel_to_cell(test.past[:, TORSO])
    p = np.exp(logp[np.arange(len(test)), cells[:, 0] * GRID_W + cells[:, 1]])
    frac = float(np.mean(p > 1.0 / GRID_CELLS))
    print(f"torso cell above uniform on {frac:.3f} of {len(test)} held-out pairs")
    assert frac >= 0.8


@criterion("pose-refine", "pose stage refines the painted centre")
def test_pose_stays_near_painted_centre(bench):
    tables, _, vocab = bench.data()
    test = tables["test_thermal"]
    r = test.past[:, TORSO]
    centers = painted_centers(vocab, test.past_type, r)
    logp = predict_pose(bench.model("thermal", "pose"), test.images, test.current, r, centers)
    rows, cols = np.divmod(np.argmax(logp, axis=2), GRID_W)
    decoded = np.empty_like(test.past)
    decoded[:, TORSO] = r
    decoded[:, NON_TORSO] = cell_to_pixel(rows, cols)
    to_center = np.array([mpjpe(Pose2D(d), center_pose(vocab, z, t)) for d, z, t in zip(decoded, test.past_type, r)])
    before = np.array([mpjpe(Pose2D(c), Pose2D(g)) for c, g in zip(centers, test.past)])
    after = np.array([mpjpe(Pose2D(d), Pose2D(g)) for d, g in zip(decoded, test.past)])
    print(f"decoded-to-centre MPJPE mean {to_center.mean():.2f}; to truth before {before.mean():.2f} after {after.mean():.2f}")
    assert to_center.mean() <= 30.0


@criterion("sweep-scenes", "closer at full intensity than at quarter")
def test_sweep_closer_at_full_than_quarter(bench):
    sw = bench.sweep()
    per = np.asarray(sw["per_scene"])
    frac = float(np.mean(per[:, -1] < per[:, 0]))
    print(f"closer at 1.0 than 0.25 on {frac:.3f} of {len(per)} scenes")
    assert len(per) >= 20 and frac >= 0.8
