from __future__ import annotations

import json

import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from thermal_past.dataset import (
    ClipRecord, Extrinsics, Intrinsics, PairTable, SamplePair, SplitManifest, load_clip, make_pairs, motion_filter,
    pair_indices, pool_image, project_to_image, split_by_clip, triangulate_scales, write_clip,
)
from thermal_past.errors import ClipFormatError, DegenerateInputError, ParameterError
from thermal_past.pose import IMAGE_H, IMAGE_W, J, Pose2D, ThermalFrame
from thermal_past.vocabulary import build_vocabulary, poses_to_vectors


def make_clip(joints: np.ndarray, clip_id="c0", fps=15) -> ClipRecord:
    frames = [ThermalFrame(np.zeros((IMAGE_H, IMAGE_W), np.float32), i / fps) for i in range(len(joints))]
    return ClipRecord(clip_id, fps, frames, [Pose2D(j) for j in joints], source="synthetic")


def walking(n, speed=2.0, seed=0):
    rng = np.random.default_rng(seed)
    base = rng.uniform(50, 200, (J, 2))
    return np.stack([base + [speed * t, 0.0] for t in range(n)])


def write_fixture(root, n=3, counts=None):
    d = root / "clips" / "fx"
    (d / "thermal").mkdir(parents=True)
    rng = np.random.default_rng(0)
    for i in range(n):
        img = rng.integers(0, 65536, (IMAGE_H, IMAGE_W)).astype(np.uint16) if counts is None else counts[i]
        cv2.imwrite(str(d / "thermal" / f"{i:06d}.png"), img)
    poses = [{"joints": rng.uniform(0, 200, (J, 2)).tolist(), "valid": [True] * J} for _ in range(n)]
    (d / "poses.json").write_text(json.dumps({"frames": poses}))
    (d / "meta.json").write_text(json.dumps({"fps": 15, "actor": "a", "room": "r", "intensity_range": [0, 65535], "annotations": []}))
    return d


# ---------------------------------------------------------------- loading


def test_fixture_clip_loads(tmp_path):
    d = write_fixture(tmp_path)
    clip = load_clip(d)
    assert len(clip) == 3 and len(clip.frames) == 3
    poses = json.loads((d / "poses.json").read_text())["frames"]
    for p, raw in zip(clip.poses, poses):
        assert np.array_equal(p.joints, np.asarray(raw["joints"]))
    assert [f.timestamp for f in clip.frames] == [0.0, 1 / 15, 2 / 15]


def test_sixteen_bit_endpoints(tmp_path):
    counts = [np.full((IMAGE_H, IMAGE_W), 65535, np.uint16), np.zeros((IMAGE_H, IMAGE_W), np.uint16), np.full((IMAGE_H, IMAGE_W), 32768, np.uint16)]
    clip = load_clip(write_fixture(tmp_path, counts=counts))
    assert np.all(clip.frames[0].values == 1.0)
    assert np.all(clip.frames[1].values == 0.0)
    assert np.allclose(clip.frames[2].values, 32768 / 65535)


def test_missing_pose_names_the_frame(tmp_path):
    d = write_fixture(tmp_path)
    doc = json.loads((d / "poses.json").read_text())
    doc["frames"] = doc["frames"][:2]
    (d / "poses.json").write_text(json.dumps(doc))
    with pytest.raises(ClipFormatError) as e:
        load_clip(d)
    assert e.value.frame == 2 and "2" in str(e.value)


def test_missing_frame_and_gaps_and_bad_json(tmp_path):
    d = write_fixture(tmp_path / "a")
    (d / "thermal" / "000002.png").unlink()
    with pytest.raises(ClipFormatError, match="000002"):
        load_clip(d)
    d = write_fixture(tmp_path / "b")
    (d / "thermal" / "000001.png").rename(d / "thermal" / "000005.png")
    with pytest.raises(ClipFormatError, match="contiguous"):
        load_clip(d)
    d = write_fixture(tmp_path / "c")
    (d / "poses.json").write_text("{not json")
    with pytest.raises(ClipFormatError, match="malformed"):
        load_clip(d)
    d = write_fixture(tmp_path / "e")
    (d / "meta.json").unlink()
    with pytest.raises(ClipFormatError, match="meta.json"):
        load_clip(d)


def test_write_then_load_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    joints = rng.uniform(0, 250, (4, J, 2))
    clip = make_clip(joints)
    clip.frames = [ThermalFrame(rng.random((IMAGE_H, IMAGE_W)).astype(np.float32), i / 15) for i in range(4)]
    clip.meta = {"intensity_range": [0, 65535]}
    back = load_clip(write_clip(clip, tmp_path))
    assert back.poses == clip.poses
    for a, b in zip(back.frames, clip.frames):
        assert np.abs(a.values - b.values).max() <= 0.5 / 65535 + 1e-7


def test_clip_invariants():
    with pytest.raises(ClipFormatError):
        ClipRecord("x", 15, [ThermalFrame(np.zeros((IMAGE_H, IMAGE_W)), 0.0)], [])
    frames = [ThermalFrame(np.zeros((IMAGE_H, IMAGE_W)), t) for t in (0.0, 0.5)]
    with pytest.raises(ClipFormatError):
        ClipRecord("x", 15, frames, [Pose2D(np.zeros((J, 2)))] * 2)


# ---------------------------------------------------------------- motion rule and pairing


def test_static_actor_has_no_pairs():
    clip = make_clip(np.repeat(walking(1), 100, axis=0))
    assert motion_filter(clip) == []
    assert make_pairs(clip) == []


def test_uniform_50px_translation_kept():
    joints = np.stack([walking(1)[0] + [50.0 * t / 45, 0.0] for t in range(46)])
    assert motion_filter(make_clip(joints)) == [45]


def motion_oracle(joints, w=45, thr=45.0):
    keep = []
    for t in range(w, len(joints)):
        d = [np.hypot(*(joints[t, j] - joints[t - w, j])) for j in range(J)]
        if sum(d) / J >= thr:
            keep.append(t)
    return keep


def test_mixed_clip_matches_loop_oracle():
    rng = np.random.default_rng(2)
    speeds = np.concatenate([np.zeros(60), np.full(60, 1.5), np.zeros(40), np.full(40, 0.8)])
    pos = np.cumsum(speeds)
    joints = walking(1)[0][None] + np.stack([pos, np.zeros_like(pos)], axis=1)[:, None, :] + rng.normal(0, 0.5, (200, J, 2))
    assert motion_filter(make_clip(joints)) == motion_oracle(joints)


def test_pair_counts_and_bit_exact_past():
    clip = make_clip(walking(46, speed=5))
    pairs = make_pairs(clip, stride=1)
    assert [p.frame_index for p in pairs] == [45]
    clip = make_clip(walking(150, speed=5))
    pairs = make_pairs(clip, stride=15)
    assert [p.frame_index for p in pairs] == [45, 60, 75, 90, 105, 120, 135]
    for p in pairs:
        assert p.past_pose is clip.poses[p.frame_index - 45] or p.past_pose == clip.poses[p.frame_index - 45]
        assert p.past_type is None
        assert np.array_equal(p.past_torso, clip.poses[p.frame_index - 45].torso)
    assert pair_indices(clip.poses, stride=15) == [p.frame_index for p in pairs]


def test_pairs_deterministic_and_valid():
    clip = make_clip(walking(120, speed=3))
    a, b = make_pairs(clip, stride=2), make_pairs(clip, stride=2)
    assert [(p.frame_index, p.past_pose) for p in a] == [(p.frame_index, p.past_pose) for p in b]
    with pytest.raises(ParameterError):
        SamplePair(clip.frames[0], clip.poses[0], clip.poses[0], "c", 10)
    invalid = Pose2D(clip.poses[0].joints, np.arange(J) != 3)
    with pytest.raises(ParameterError):
        SamplePair(clip.frames[50], clip.poses[50], invalid, "c", 50)


def test_invalid_joints_skip_pairs():
    joints = walking(60, speed=5)
    clip = make_clip(joints)
    clip.poses[3] = Pose2D(joints[3], np.arange(J) != 0)
    assert 48 not in [p.frame_index for p in make_pairs(clip)]


# ---------------------------------------------------------------- splits


def test_split_counts_and_determinism():
    ids = [f"c{i}" for i in range(10)]
    m = split_by_clip(ids, seed=3)
    assert (len(m.train), len(m.val), len(m.test)) == (8, 1, 1)
    assert split_by_clip(ids, seed=3) == m
    with pytest.raises(ParameterError):
        split_by_clip(ids, (0.8, 0.1, 0.2))


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 60), st.integers(0, 1000))
def test_split_partition_property(n, seed):
    ids = [f"clip{i}" for i in range(n)]
    m = split_by_clip(ids, seed=seed)
    sets = [set(m.train), set(m.val), set(m.test)]
    assert set().union(*sets) == set(ids)
    assert all(not (a & b) for i, a in enumerate(sets) for b in sets[i + 1 :])
    assert sum(map(len, sets)) == n


def test_manifest_json_roundtrip(tmp_path):
    m = split_by_clip([f"c{i}" for i in range(7)], seed=1)
    m.save(tmp_path / "s.json")
    assert SplitManifest.load(tmp_path / "s.json") == m


# ---------------------------------------------------------------- pair table


def test_pair_table_roundtrip_and_types(tmp_path):
    clip = make_clip(walking(120, speed=4))
    pairs = make_pairs(clip, stride=3)
    t = PairTable.from_pairs(pairs)
    assert len(t) == len(pairs) and t.images.shape[1:] == (72, 96)
    vocab = build_vocabulary(poses_to_vectors([p.past_pose for p in pairs]) + np.random.default_rng(0).normal(0, 1, (len(pairs), 28)), k=3)
    typed = t.with_types(vocab)
    assert np.all((typed.past_type >= 0) & (typed.past_type < 3))
    typed.save(tmp_path / "t.npz")
    back = PairTable.load(tmp_path / "t.npz")
    assert back.digest() == typed.digest()
    row = back.row(0)
    assert row.past_pose == pairs[0].past_pose and row.frame_index == pairs[0].frame_index


def test_pool_image():
    v = np.arange(IMAGE_H * IMAGE_W, dtype=np.float32).reshape(IMAGE_H, IMAGE_W)
    p = pool_image(v)
    assert p.shape == (72, 96)
    assert np.isclose(p[0, 0], v[:4, :4].mean())
    assert pool_image(p) is p or np.array_equal(pool_image(p), p)


# ---------------------------------------------------------------- triangulation


def rand_ext(rng):
    R1, R2 = Rotation.random(2, random_state=rng.integers(1 << 31)).as_matrix()
    return Extrinsics(R1, rng.normal(0, 1, 3), R2, rng.normal(0, 1, 3))


def world(x, R, t):
    return x @ R.T + t


def cam_from_world(X, R, t):
    return (X - t) @ R


def test_triangulation_analytic_cases():
    rng = np.random.default_rng(0)
    P = rng.normal(0, 1, (J, 3))
    assert triangulate_scales(P, P) == (1.0, 1.0)
    assert triangulate_scales(P, 2 * P) == (1.0, 0.5)
    ext = Extrinsics(np.eye(3), np.zeros(3), np.eye(3), np.zeros(3))
    assert triangulate_scales(P, P, ext)[1] == 1.0


def test_triangulation_matches_grid_search():
    rng = np.random.default_rng(1)
    grid = np.arange(0.1, 10.0 + 1e-12, 1e-4)
    for _ in range(100):
        ext = rand_ext(rng)
        Pw = rng.normal(0, 1, (J, 3)) + [0, 0, 4]
        b_true = rng.uniform(0.3, 3.0)
        Qw = Pw / b_true + rng.normal(0, 0.05, (J, 3))
        p_cam = cam_from_world(Pw, ext.R1, ext.t1)
        q_cam = cam_from_world(Qw, ext.R2, ext.t2)
        _, b = triangulate_scales(p_cam, q_cam, ext)
        P = world(p_cam, ext.R1, ext.t1)
        Q = world(q_cam, ext.R2, ext.t2)
        losses = np.array([((P - g * Q) ** 2).sum() for g in grid])
        assert abs(b - grid[np.argmin(losses)]) <= 1e-3


@pytest.mark.parametrize("c", [2.0, 4.0, 0.5, 0.25])
def test_triangulation_scale_equivariance(c):
    rng = np.random.default_rng(2)
    P, Q = rng.normal(0, 1, (J, 3)), rng.normal(0, 1, (J, 3))
    _, b = triangulate_scales(P, Q)
    assert triangulate_scales(P, c * Q)[1] == b / c


def test_triangulation_errors_and_pivots():
    P = np.random.default_rng(3).normal(0, 1, (J, 3))
    with pytest.raises(DegenerateInputError):
        triangulate_scales(P, np.zeros((J, 3)))
    with pytest.raises(DegenerateInputError):
        triangulate_scales(P, P, valid=np.arange(J) < 2)
    with pytest.raises(ParameterError):
        triangulate_scales(P, P, pivot="nowhere")
    c = np.array([1.0, -2.0, 0.5])
    ext = Extrinsics(t2=c)
    # camera 2 sees the first pose shrunk by half toward its own centre
    q_cam = (P - c) / 2
    assert np.isclose(triangulate_scales(P, q_cam, ext, pivot="camera")[1], 2.0, rtol=1e-12)
    assert not np.isclose(triangulate_scales(P, q_cam, ext, pivot="world")[1], 2.0, rtol=1e-3)


# ---------------------------------------------------------------- projection


def test_projection_cases():
    K = Intrinsics(fx=300.0, fy=310.0, cx=192.0, cy=144.0)
    X = np.zeros((J, 3))
    X[:, 2] = np.linspace(1, 9, J)
    p = project_to_image(X, K)
    assert np.allclose(p.joints, [192.0, 144.0])
    Y = np.tile([[0.2, -0.1, 2.0]], (J, 1))
    a = project_to_image(Y, K).joints[0] - [192, 144]
    b = project_to_image(Y * [1, 1, 2], K).joints[0] - [192, 144]
    assert np.allclose(b, a / 2)


def test_projection_matches_scalar_loop():
    rng = np.random.default_rng(4)
    K = Intrinsics(fx=500.0, fy=480.0, cx=320.0, cy=240.0, width=640, height=480)
    for _ in range(20):
        X = np.column_stack([rng.uniform(-1, 1, J), rng.uniform(-1, 1, J), rng.uniform(2, 6, J)])
        got = project_to_image(X, K)
        for j in range(J):
            u = (500.0 * X[j, 0] / X[j, 2] + 320.0) * 384 / 640
            v = (480.0 * X[j, 1] / X[j, 2] + 240.0) * 288 / 480
            u, v = min(max(u, 0.0), 383.0), min(max(v, 0.0), 287.0)
            assert np.isclose(got.joints[j, 0], u, rtol=0, atol=1e-9) and np.isclose(got.joints[j, 1], v, rtol=0, atol=1e-9)


def test_projection_non_positive_depth_invalid():
    K = Intrinsics(300, 300, 192, 144)
    X = np.ones((J, 3))
    X[4, 2] = 0.0
    X[5, 2] = -1.0
    p = project_to_image(X, K)
    assert not p.valid[4] and not p.valid[5] and p.valid.sum() == J - 2
    with pytest.raises(ParameterError):
        project_to_image(np.ones((J, 2)), K)
