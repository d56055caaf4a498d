from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from thermal_past.errors import DegenerateInputError, ParameterError
from thermal_past.pose import (
    GRID_CELLS, GRID_H, GRID_W, IMAGE_H, IMAGE_W, J, NON_TORSO, SKELETON, TORSO, HeatmapGrid, Pose2D,
    cell_to_pixel, compose_pose, decode_argmax, load_heatmap, mpjpe, pixel_to_cell, render_heatmap,
    sample_cells, sample_from_heatmap, save_heatmap, split_pose, topk_mpjpe,
)


def random_pose(rng, valid=None):
    return Pose2D(rng.uniform([0, 0], [IMAGE_W, IMAGE_H], size=(J, 2)), valid)


# ---------------------------------------------------------------- scalar oracles


def mpjpe_oracle(pred, gt):
    total, n = 0.0, 0
    for j in range(J):
        if not gt.valid[j]:
            continue
        dx = pred.joints[j, 0] - gt.joints[j, 0]
        dy = pred.joints[j, 1] - gt.joints[j, 1]
        total += math.sqrt(dx * dx + dy * dy)
        n += 1
    return total / n


def topk_oracle(preds, gt, k):
    errs = sorted(mpjpe_oracle(p, gt) for p in preds)
    return sum(errs[:k]) / k


def test_mpjpe_matches_scalar_oracle_1000_cases():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        valid = rng.random(J) > 0.2
        valid[rng.integers(J)] = True
        gt, pred = random_pose(rng, valid), random_pose(rng)
        got, want = mpjpe(pred, gt), mpjpe_oracle(pred, gt)
        assert abs(got - want) <= 1e-9 * max(abs(want), 1e-12)


def test_topk_matches_oracle_and_is_monotone():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        gt = random_pose(rng)
        preds = [random_pose(rng) for _ in range(rng.integers(5, 12))]
        vals = [topk_mpjpe(preds, gt, k) for k in (1, 3, 5)]
        for k, v in zip((1, 3, 5), vals):
            want = topk_oracle(preds, gt, k)
            assert abs(v - want) <= 1e-9 * want
        assert vals[0] <= vals[1] <= vals[2]


coords = st.integers(0, 383 * 64).map(lambda v: v / 64.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(coords, min_size=4 * J, max_size=4 * J), st.integers(-500, 500), st.integers(-500, 500))
def test_mpjpe_translation_invariance_exact(vals, dx, dy):
    a = np.array(vals[: 2 * J]).reshape(J, 2)
    b = np.array(vals[2 * J :]).reshape(J, 2)
    off = np.array([dx, dy], dtype=np.float64)
    assert mpjpe(Pose2D(a + off), Pose2D(b + off)) == mpjpe(Pose2D(a), Pose2D(b))


def test_mpjpe_ignores_invalid_ground_truth_joints():
    rng = np.random.default_rng(2)
    gt = random_pose(rng, valid=np.arange(J) < 5)
    pred = Pose2D(np.where((np.arange(J) < 5)[:, None], gt.joints, 0.0))
    assert mpjpe(pred, gt) == 0.0
    with pytest.raises(DegenerateInputError):
        mpjpe(pred, Pose2D(gt.joints, np.zeros(J, bool)))


def test_topk_parameter_errors():
    rng = np.random.default_rng(3)
    gt = random_pose(rng)
    with pytest.raises(ParameterError):
        topk_mpjpe([gt], gt, 0)
    with pytest.raises(ParameterError):
        topk_mpjpe([gt, gt], gt, 3)


# ---------------------------------------------------------------- heatmap codec


def test_render_decode_roundtrip_within_4px():
    rng = np.random.default_rng(4)
    pts = rng.uniform([0, 0], [IMAGE_W, IMAGE_H], size=(100, 2))
    h = render_heatmap(pts)
    assert h.shape == (GRID_H, GRID_W)
    sums = h.values.reshape(100, -1).sum(axis=1)
    assert np.all(np.abs(sums - 1) <= 1e-5)
    dec, degenerate = decode_argmax(h)
    assert not degenerate.any()
    assert np.linalg.norm(dec - pts, axis=1).max() <= 4.0


def test_render_full_resolution_grid_is_normalized():
    h = render_heatmap([[10.5, 20.25], [380.0, 5.0]], out_size=(IMAGE_H, IMAGE_W))
    assert h.shape == (IMAGE_H, IMAGE_W)
    assert np.allclose(h.values.reshape(2, -1).sum(axis=1), 1.0, atol=1e-5)
    dec, _ = decode_argmax(h)
    assert np.abs(dec - [[10.5, 20.25], [380.0, 5.0]]).max() <= 1.0


def test_cell_centres_roundtrip_exactly():
    rows = np.arange(GRID_H).repeat(GRID_W)
    cols = np.tile(np.arange(GRID_W), GRID_H)
    px = cell_to_pixel(rows, cols)
    cells = pixel_to_cell(px)
    assert np.array_equal(cells[:, 0], rows) and np.array_equal(cells[:, 1], cols)
    dec, _ = decode_argmax(render_heatmap(px[::97]))
    assert np.array_equal(dec, px[::97])


def test_out_of_frame_points_render_at_nearest_edge():
    h = render_heatmap([[-50.0, -50.0], [1000.0, 1000.0]])
    dec, _ = decode_argmax(h)
    assert np.array_equal(dec[0], cell_to_pixel(0, 0))
    assert np.array_equal(dec[1], cell_to_pixel(GRID_H - 1, GRID_W - 1))


def test_render_rejects_bad_inputs():
    with pytest.raises(ParameterError):
        render_heatmap([[1.0, 2.0]], sigma=0)
    with pytest.raises(ParameterError):
        render_heatmap([[1.0, 2.0]], out_size=(100, 100))
    with pytest.raises(ParameterError):
        render_heatmap([[np.nan, 2.0]])


def test_heatmap_validation():
    with pytest.raises(ParameterError):
        HeatmapGrid(np.full((1, 4, 4), 0.5))
    with pytest.raises(ParameterError):
        HeatmapGrid(-np.ones((1, 2, 2)) / 4)
    HeatmapGrid(np.full((1, 4, 4), 0.5), normalized=False)


def test_flat_channel_decodes_to_centre_and_is_flagged():
    h = HeatmapGrid(np.full((2, GRID_H, GRID_W), 1.0 / GRID_CELLS))
    dec, degenerate = decode_argmax(h)
    assert degenerate.all()
    assert np.array_equal(dec, [[IMAGE_W / 2, IMAGE_H / 2]] * 2)


def test_sampling_chi_square():
    rng = np.random.default_rng(5)
    p = rng.random((6, 8)) + 0.05
    v = np.kron(p, np.ones((12, 12)))
    h = HeatmapGrid(v / v.sum())
    idx = sample_cells(h, 123, size=100_000)
    counts = np.bincount(idx, minlength=GRID_CELLS)
    expected = h.values.reshape(-1) * 100_000
    assert chisquare(counts, expected).pvalue > 0.01


def test_sampling_never_hits_zero_mass_and_is_seeded():
    v = np.zeros((1, GRID_H, GRID_W))
    v[0, 10, 20] = 0.25
    v[0, 40, 70] = 0.75
    h = HeatmapGrid(v)
    xy = sample_from_heatmap(h, 7, size=5000)
    assert set(map(tuple, xy)) <= {tuple(cell_to_pixel(10, 20)), tuple(cell_to_pixel(40, 70))}
    assert np.array_equal(sample_from_heatmap(h, 9, size=50), sample_from_heatmap(h, 9, size=50))
    assert sample_from_heatmap(h, 1).shape == (2,)


def test_sampling_all_zero_raises_and_unnormalized_warns():
    with pytest.raises(DegenerateInputError):
        sample_cells(HeatmapGrid(np.zeros((1, 4, 4)), normalized=False), 0)
    with pytest.warns(UserWarning):
        sample_cells(HeatmapGrid(np.ones((1, GRID_H, GRID_W)), normalized=False), 0)


def test_heatmap_file_roundtrip(tmp_path):
    h = render_heatmap([[100.0, 50.0], [3.0, 250.0]])
    save_heatmap(tmp_path / "h.bin", h)
    back = load_heatmap(tmp_path / "h.bin")
    assert back.shape == h.shape and back.channels == 2
    assert np.allclose(back.values, h.values, atol=1e-7)
    raw = (tmp_path / "h.bin").read_bytes()
    assert int.from_bytes(raw[:4], "little") > 0


# ---------------------------------------------------------------- pose algebra


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2 * (J - 1), max_size=2 * (J - 1)), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_compose_split_roundtrip_exact(vals, rx, ry):
    q = np.array(vals).reshape(J - 1, 2)
    p = compose_pose(q, [rx, ry])
    q2, r2 = split_pose(p)
    assert np.array_equal(q2, q) and np.array_equal(r2, [rx, ry])
    assert np.array_equal(p.torso, [rx, ry])


def test_mirror_is_an_involution_and_swaps_labels():
    rng = np.random.default_rng(6)
    # dyadic coordinates keep W - (W - x) exact
    p = Pose2D(np.round(random_pose(rng).joints * 64) / 64)
    assert p.mirrored().mirrored() == p
    m = p.mirrored()
    for a, b in SKELETON.flip_pairs:
        assert m.joints[a, 0] == IMAGE_W - p.joints[b, 0]
    assert m.joints[TORSO, 0] == IMAGE_W - p.joints[TORSO, 0]


def test_pose_validation_and_clamping():
    with pytest.raises(ParameterError):
        Pose2D(np.zeros((14, 2)))
    with pytest.raises(ParameterError):
        Pose2D(np.full((J, 2), np.inf))
    p = Pose2D.from_array(np.full((J, 2), -5.0))
    assert p.joints.min() == 0.0
    q = Pose2D.from_array(np.full((J, 2), 1e4))
    assert q.joints[0, 0] == IMAGE_W - 1 and q.joints[0, 1] == IMAGE_H - 1
    raw = Pose2D(np.full((J, 2), -5.0))
    assert raw.joints.min() == -5.0


def test_pose_json_roundtrip():
    rng = np.random.default_rng(7)
    p = random_pose(rng, rng.random(J) > 0.5)
    assert Pose2D.from_json(p.to_json()) == p


def test_skeleton_constants():
    assert J == 15 and TORSO == 8
    assert list(NON_TORSO) == [j for j in range(15) if j != 8]
    perm = SKELETON.flip_permutation
    assert np.array_equal(perm[perm], np.arange(J))
