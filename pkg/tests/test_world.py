import numpy as np
import pytest

from condo.errors import InfeasibleSplit, InvalidParams
from condo.geometry import Pose, quat_normalize
from condo.world import (BenchmarkConfig, NewInferenceScan, NewSceneTraining, SceneParams, TrajectoryParams,
                         benchmark_from_dict, benchmark_to_dict, build_benchmark, generate_scan, load_benchmark,
                         make_scene, render, render_batch, save_benchmark, split_holdout)

NOISELESS = SceneParams(obs_noise_sigma=0.0)


def box_waypoints(lo, hi, k, seed):
    rng = np.random.default_rng(seed)
    return rng.uniform(lo, hi, size=(k, 3))


def test_make_scene_deterministic_and_masked():
    a = make_scene("s", 7)
    b = make_scene("s", 7)
    np.testing.assert_array_equal(a.projection, b.projection)
    np.testing.assert_array_equal(a.bias, b.bias)
    assert np.all(a.projection[64:, 7] == 0)
    assert np.all(a.projection[:64, 7] != 0)
    c = make_scene("s", 8)
    assert np.any(a.projection != c.projection)


@pytest.mark.parametrize("params", [SceneParams(feature_dim=4), SceneParams(workspace_max=(1.0, 1.0, 0.0)),
                                    SceneParams(condition_sensitive_fraction=1.5)])
def test_make_scene_rejects_bad_params(params):
    with pytest.raises(InvalidParams):
        make_scene("s", 0, params)


def test_render_condition_dims():
    scene = make_scene("s", 1, NOISELESS)
    pose = Pose([1.0, -2.0, 1.0], quat_normalize([1, 0.1, 0.2, 0.0]))
    f0 = render(scene, pose, 0.0)
    np.testing.assert_array_equal(f0, render(scene, pose, 0.0))
    f1 = render(scene, pose, 1.0)
    inv = scene.invariant_dims
    np.testing.assert_array_equal(f0[inv], f1[inv])
    assert np.any(f0[:scene.n_condition_sensitive] != f1[:scene.n_condition_sensitive])


def test_render_lipschitz_and_range():
    scene = make_scene("s", 2, NOISELESS)
    rng = np.random.default_rng(0)
    lo, hi = scene.workspace
    for _ in range(200):
        p = rng.uniform(lo, hi, size=(2, 3))
        q = quat_normalize(rng.standard_normal((2, 4)))
        c = rng.uniform(0, 1, 2)
        f = np.stack([render_batch(scene, p[i:i + 1], q[i:i + 1], c[i])[0] for i in range(2)])
        x = [np.concatenate([2 * (p[i] - lo) / (hi - lo) - 1, q[i], [c[i]]]) for i in range(2)]
        bound = np.linalg.norm(scene.projection, axis=1) * np.linalg.norm(x[0] - x[1])
        assert np.all(np.abs(f[0] - f[1]) <= bound + 1e-12)
    noisy = make_scene("s", 2, SceneParams(obs_noise_sigma=0.1))
    f = render_batch(noisy, rng.uniform(lo, hi, (500, 3)), quat_normalize(rng.standard_normal((500, 4))), 0.5, rng)
    assert np.all(np.isfinite(f)) and np.all(np.abs(f) <= 1 + 5 * 0.1)


def test_generate_scan_steps_and_determinism():
    scene = make_scene("s", 3)
    wps = box_waypoints([-10, -10, 1], [10, 10, 3], 6, 0)
    traj = TrajectoryParams(128, wps, max_step=1.0, seed=11)
    s1 = generate_scan(scene, traj, 0.0, "train", "a")
    s2 = generate_scan(scene, traj, 0.0, "train", "a")
    np.testing.assert_array_equal(s1.features, s2.features)
    np.testing.assert_array_equal(s1.orientations, s2.orientations)
    steps = np.linalg.norm(np.diff(s1.positions, axis=0), axis=1)
    assert np.all(steps <= 1.0)
    assert np.allclose(np.linalg.norm(s1.orientations, axis=1), 1.0, atol=1e-12)
    with pytest.raises(InvalidParams):
        generate_scan(scene, TrajectoryParams(16, wps, max_step=0.01, seed=1), 0.0, "train", "b")


def test_disjoint_waypoint_boxes_give_disjoint_scans():
    scene = make_scene("s", 4)
    a = generate_scan(scene, TrajectoryParams(256, box_waypoints([-18, -18, 1], [-2, 18, 3], 5, 1), 1.0, 1),
                      0.0, "train", "a")
    b = generate_scan(scene, TrajectoryParams(256, box_waypoints([2, -18, 1], [18, 18, 3], 5, 2), 1.0, 2),
                      0.0, "train", "b")
    assert a.positions[:, 0].max() < b.positions[:, 0].min()


def _scan(n):
    scene = make_scene("s", 5)
    wps = np.array([[-15.0, 0, 1], [15.0, 0, 1]])
    return generate_scan(scene, TrajectoryParams(n, wps, 1.0, 0), 0.0, "train", "x")


def _blocks(mask):
    edges = np.diff(np.concatenate([[0], mask.astype(int), [0]]))
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


def test_split_holdout_one_block():
    s = split_holdout(_scan(128), 1 / 8, 16, np.random.default_rng(0))
    assert s.holdout_mask.sum() == 16
    (start, end), = _blocks(s.holdout_mask)
    assert end - start == 16


def test_split_holdout_eight_blocks():
    for seed in range(20):
        s = split_holdout(_scan(1024), 1 / 8, 16, np.random.default_rng(seed))
        assert s.holdout_mask.sum() == 128
        # touching blocks merge, so every run length is a multiple of 16
        assert all((e - b) % 16 == 0 for b, e in _blocks(s.holdout_mask))


def test_split_holdout_infeasible():
    with pytest.raises(InfeasibleSplit):
        split_holdout(_scan(64), 0.01, 16, np.random.default_rng(0))


def test_condition_shift_preset():
    bm = build_benchmark(BenchmarkConfig(n_frames=256, max_step=1.0))
    assert [s.condition for s in bm.initial_training] == [0.0, 0.0, 0.0]
    conds = [ev.scan.condition for ev in bm.events]
    assert conds == [0.4, 0.8, 1.0]
    assert all(isinstance(ev, NewInferenceScan) for ev in bm.events)
    for s in bm.all_scans:
        assert s.holdout_mask.sum() == 32
        assert np.all(np.linalg.norm(np.diff(s.positions, axis=0), axis=1) <= 1.0)


def test_novel_pose_preset_disjoint_regions():
    bm = build_benchmark(BenchmarkConfig(preset="novel_pose", n_frames=256, max_step=1.0))
    assert all(s.condition == 0.0 for s in bm.all_scans)
    train_x = [(s.positions[:, 0].min(), s.positions[:, 0].max()) for s in bm.initial_training]
    for ev in bm.events:
        lo, hi = ev.scan.positions[:, 0].min(), ev.scan.positions[:, 0].max()
        assert all(hi < a or lo > b for a, b in train_x)


def test_multi_scene_preset_order():
    bm = build_benchmark(BenchmarkConfig(preset="multi_scene", n_frames=128, max_step=2.0, n_scenes=3,
                                         n_initial_scenes=2, n_train_scans=2, n_inference_scans=1))
    assert {s.scene_id for s in bm.initial_training} == {"scene0", "scene1"}
    kinds = [type(ev).__name__ for ev in bm.events]
    assert kinds == ["NewInferenceScan", "NewInferenceScan", "NewSceneTraining", "NewInferenceScan"]
    assert bm.events[2].scene_id == "scene2" and isinstance(bm.events[2], NewSceneTraining)


def test_benchmark_deterministic_and_json_roundtrip(tmp_path):
    cfg = BenchmarkConfig(n_frames=128, max_step=2.0)
    a, b = build_benchmark(cfg), build_benchmark(cfg)
    for x, y in zip(a.all_scans, b.all_scans):
        np.testing.assert_array_equal(x.features, y.features)
        np.testing.assert_array_equal(x.holdout_mask, y.holdout_mask)
    save_benchmark(a, tmp_path / "bm.json")
    c = load_benchmark(tmp_path / "bm.json")
    for x, y in zip(a.all_scans, c.all_scans):
        assert x.scan_id == y.scan_id and x.role == y.role and x.condition == y.condition
        for f in ("positions", "orientations", "features", "holdout_mask"):
            np.testing.assert_array_equal(getattr(x, f), getattr(y, f))
    np.testing.assert_array_equal(a.scenes[0].projection, c.scenes[0].projection)
    assert benchmark_to_dict(c) == benchmark_to_dict(a)
    assert benchmark_to_dict(benchmark_from_dict(benchmark_to_dict(a))) == benchmark_to_dict(a)


def test_unknown_preset():
    with pytest.raises(InvalidParams):
        build_benchmark(BenchmarkConfig(preset="nope"))
