import math

import numpy as np
import pytest

from condo.errors import DuplicateScene, UnknownScene
from condo.geometry import Pose, quat_normalize
from condo.model import (DISTILLED, SUPERVISED, AdamState, TrainBatch, add_head, batch_step, forward,
                         gradient_check, init_model, load_checkpoint, loss_and_grads, per_item_losses, pose_loss,
                         save_checkpoint)


def small_model(seed=0, scenes=("a",), **kw):
    return init_model(16, (12, 10), 8, list(scenes), seed=seed, **kw)


def random_items(rng, n, scenes=("a",), source=SUPERVISED):
    return [(scenes[i % len(scenes)], rng.standard_normal(16),
             Pose(rng.standard_normal(3), quat_normalize(rng.standard_normal(4))), source, f"f{i}")
            for i in range(n)]


def test_init_deterministic_and_defaults():
    a, b = small_model(3), small_model(3)
    assert a.params.keys() == b.params.keys()
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert a.s_t == 0.0 and a.s_r == -3.0
    assert np.all(a.params["backbone.0.b"] == 0)
    limit = math.sqrt(6 / (16 + 12))
    assert np.abs(a.params["backbone.0.W"]).max() <= limit
    t, r = forward(a, "a", np.random.default_rng(0).standard_normal(16))
    assert t.shape == (3,) and r.shape == (4,)
    assert np.all(np.isfinite(t)) and np.all(np.isfinite(r))


def test_forward_properties():
    m = small_model(1)
    m.params["head.a.W"][:] = 0.0
    t, r = forward(m, "a", np.ones(16))
    np.testing.assert_array_equal(t, 0)
    np.testing.assert_array_equal(r, 0)
    m = small_model(1)
    x = np.random.default_rng(1).standard_normal(16)
    t1, r1 = forward(m, "a", x)
    t2, r2 = forward(m, "a", x)
    np.testing.assert_array_equal(t1, t2)
    m.params["backbone.0.W"][0, 0] += 1e-3
    t3, r3 = forward(m, "a", x)
    assert np.any(t3 != t1) or np.any(r3 != r1)
    with pytest.raises(UnknownScene):
        forward(m, "zzz", x)


def test_pose_loss_closed_forms():
    q = np.array([0.5, 0.5, 0.5, 0.5])
    target = Pose([1, 2, 3], q)
    loss, gt, gr, dst, dsr = pose_loss([1, 2, 3], q, target, 0.0, 0.0)
    assert loss == 0
    assert dst == 1 and dsr == 1
    np.testing.assert_array_equal(gt, 0)
    loss, *_ = pose_loss([2, 2, 3], q, target, 0.0, 0.0)
    assert loss == 1
    loss, _, _, dst, _ = pose_loss([3, 2, 3], q, target, math.log(2), 0.0)
    assert loss == pytest.approx(1.69315, abs=1e-5)
    assert loss == pytest.approx(1 + math.log(2), abs=1e-12)
    assert dst == pytest.approx(0.0, abs=1e-15)


def test_pose_loss_normalizes_target_only():
    target = Pose.identity()
    raw_target = Pose([0, 0, 0], [1, 0, 0, 0])
    loss, *_ = pose_loss([0, 0, 0], [2, 0, 0, 0], raw_target, 0.0, 0.0)
    assert loss == 1  # predicted (2,0,0,0) is not normalized
    assert pose_loss([0, 0, 0], [1, 0, 0, 0], target, 0.0, 0.0)[0] == 0


def test_pose_loss_scalar_derivatives():
    rng = np.random.default_rng(2)
    target = Pose(rng.standard_normal(3), quat_normalize(rng.standard_normal(4)))
    t, r = rng.standard_normal(3), rng.standard_normal(4)
    s_t, s_r, eps = 0.3, -1.2, 1e-6
    _, _, _, dst, dsr = pose_loss(t, r, target, s_t, s_r)
    num_t = (pose_loss(t, r, target, s_t + eps, s_r)[0] - pose_loss(t, r, target, s_t - eps, s_r)[0]) / (2 * eps)
    num_r = (pose_loss(t, r, target, s_t, s_r + eps)[0] - pose_loss(t, r, target, s_t, s_r - eps)[0]) / (2 * eps)
    assert abs(dst - num_t) < 1e-6 and abs(dsr - num_r) < 1e-6


def test_loss_lower_bound():
    rng = np.random.default_rng(3)
    for _ in range(200):
        target = Pose(rng.standard_normal(3), quat_normalize(rng.standard_normal(4)))
        s_t, s_r = rng.normal(0, 3, 2)
        loss = pose_loss(rng.standard_normal(3), rng.standard_normal(4), target, s_t, s_r)[0]
        assert loss >= s_t + s_r


def test_gradient_check_random_models():
    rng = np.random.default_rng(4)
    for k in range(5):
        m = small_model(k, scenes=("a", "b"), s_t=rng.normal(), s_r=rng.normal() - 2)
        items = random_items(rng, 6, scenes=("a", "b"))
        err = gradient_check(m, [it[0] for it in items], np.stack([it[1] for it in items]),
                             [it[2] for it in items], 1e-5)
        assert err < 1e-4


def test_untouched_head_has_zero_gradient():
    m = small_model(5, scenes=("a", "b"))
    rng = np.random.default_rng(5)
    batch = TrainBatch.from_items(random_items(rng, 4, scenes=("a",)))
    _, grads = loss_and_grads(m, batch)
    assert "head.b.W" not in grads
    # untouched head enters the check with zero analytic and zero numeric gradient
    items = random_items(rng, 3)
    assert gradient_check(m, "a", np.stack([it[1] for it in items]), [it[2] for it in items], 1e-5) < 1e-4


def test_batch_step_exact_match_moves_only_scale_params():
    m = small_model(6)
    x = np.random.default_rng(6).standard_normal(16)
    t, r = forward(m, "a", x)
    target = Pose(t, r)  # r is normalized by Pose; make the raw output match exactly
    m.params["head.a.W"][:, 3:] = 0.0
    m.params["head.a.b"][3:] = target.orientation
    t, r = forward(m, "a", x)
    np.testing.assert_array_equal(r, target.orientation)
    batch = TrainBatch.from_items([("a", x, Pose(t, r), SUPERVISED)])
    before = m.copy()
    adam = AdamState(lr=1e-3)
    loss = batch_step(m, batch, adam)
    assert loss == pytest.approx(before.s_t + before.s_r, abs=1e-12)
    for k in m.params:
        if k in ("s_t", "s_r"):
            # gradient is +1, so Adam's first step moves by -lr
            assert float(m.params[k]) == pytest.approx(float(before.params[k]) - 1e-3, abs=1e-9)
        else:
            np.testing.assert_array_equal(m.params[k], before.params[k])


def test_source_tag_does_not_change_arithmetic():
    rng = np.random.default_rng(7)
    items = random_items(rng, 8)
    a, b = small_model(7), small_model(7)
    la = batch_step(a, TrainBatch.from_items(items), AdamState())
    lb = batch_step(b, TrainBatch.from_items([(s, x, p, DISTILLED, f) for s, x, p, _, f in items]), AdamState())
    assert la == lb
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_mean_loss_is_mean_of_items():
    rng = np.random.default_rng(8)
    m = small_model(8, scenes=("a", "b"))
    batch = TrainBatch.from_items(random_items(rng, 10, scenes=("a", "b")))
    loss, _ = loss_and_grads(m, batch)
    assert abs(loss - per_item_losses(m, batch).mean()) < 1e-12


def test_zero_lr_is_noop():
    rng = np.random.default_rng(9)
    m = small_model(9)
    before = m.copy()
    for _ in range(3):
        batch_step(m, TrainBatch.from_items(random_items(rng, 4)), AdamState(lr=0.0))
    for k in m.params:
        np.testing.assert_array_equal(m.params[k], before.params[k])


def test_overfit_fixed_batch():
    rng = np.random.default_rng(10)
    m = init_model(16, (32, 32), 16, ["a"], seed=10)
    batch = TrainBatch.from_items(random_items(rng, 64))
    adam = AdamState(lr=3e-3)
    # compare the distance terms, which go to zero; the s terms alone are unbounded below
    def dist(model):
        return per_item_losses(model, batch).mean() - model.s_t - model.s_r
    initial = dist(m)
    for _ in range(200):
        batch_step(m, batch, adam)
    assert dist(m) < 0.1 * initial


def test_add_head_preserves_existing_outputs():
    m = small_model(11, scenes=("a",))
    x = np.random.default_rng(11).standard_normal((5, 16))
    before = forward(m, "a", x)
    add_head(m, "b", seed=3)
    after = forward(m, "a", x)
    np.testing.assert_array_equal(before[0], after[0])
    np.testing.assert_array_equal(before[1], after[1])
    assert np.all(np.isfinite(forward(m, "b", x)[0]))
    with pytest.raises(DuplicateScene):
        add_head(m, "b", seed=4)


def test_checkpoint_roundtrip(tmp_path):
    m = small_model(12, scenes=("a", "b"), head_scaling={"a": (np.ones(3), 2 * np.ones(3))})
    save_checkpoint(m, tmp_path / "m.json")
    n = load_checkpoint(tmp_path / "m.json")
    assert n.head_ids == m.head_ids and n.s_t == m.s_t and n.s_r == m.s_r
    for k in m.params:
        np.testing.assert_array_equal(m.params[k], n.params[k])
    x = np.random.default_rng(12).standard_normal(16)
    np.testing.assert_array_equal(forward(m, "a", x)[0], forward(n, "a", x)[0])
