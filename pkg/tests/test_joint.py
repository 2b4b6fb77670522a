import math

import numpy as np
import pytest

from conftest import check_gradient
from evdnet.dataset import make_toy_dataset
from evdnet.joint import (
    JointConfig,
    TreeNet,
    TreeSpec,
    assemble_tree,
    average_precision,
    build_head,
    class_scores,
    detection_loss,
    grid_labels,
    split_init_head,
    toy_map,
    train_head,
    tree_forward,
    two_step_train,
)
from evdnet.models import FusionSpec, build, load_checkpoint, save_checkpoint
from evdnet.tensor import ContractError


@pytest.fixture(scope="module")
def clips():
    return make_toy_dataset(2, 1, 6, 24, seed=2)


def _tree(WL=3, WH=3, seed=0, grid=6, size=24):
    single = build(FusionSpec.single(), seed=seed)
    head = build_head(1, size // grid, seed)
    return assemble_tree(TreeSpec(WL, WH, grid=grid), single, head)


def test_tree_spec_arithmetic():
    for WL in (1, 3, 5, 7):
        for WH in (1, 3, 5):
            assert TreeSpec(WL, WH).overall == WL + WH - 1
    spec = TreeSpec()
    assert spec.overall == 7 and spec.dehaze_spec == FusionSpec.parse("K2:5")
    assert TreeSpec.parse(spec.key).key == spec.key
    with pytest.raises(ContractError):
        TreeSpec(4, 3)


def test_tree_dehazed_indices():
    tree = _tree(5, 3)
    assert [i + 1 for i in tree.dehazed_indices()] == [3, 4, 5]
    assert _tree(1, 1).dehazed_indices() == (0,)


def test_tree_forward_frame_count(rng):
    tree = _tree()
    frames = [rng.uniform(size=(1, 3, 24, 24)) for _ in range(5)]
    logits, cache = tree_forward(tree, frames)
    assert logits.shape == (1, 3, 6, 6) and len(cache.dehazed) == 3
    with pytest.raises(ContractError, match="5 frames"):
        tree.forward(frames[:4])


def test_degenerate_tree_matches_single_models(rng):
    single = build(FusionSpec.single(), seed=1)
    head = build_head(1, 4, 1)
    tree = assemble_tree(TreeSpec(1, 1, grid=6), single, head)
    x = rng.uniform(size=(2, 3, 24, 24))
    want = head.forward([single.forward([x])[0]])[0]
    np.testing.assert_array_equal(tree.forward([x])[0], want)


def test_dehaze_weights_shared(rng):
    tree = _tree()
    frames = [rng.uniform(size=(1, 3, 24, 24)) for _ in range(5)]
    _, before = tree.forward(frames)
    tree.dehaze.layer("conv5").bias[:] += 0.1
    _, after = tree.forward(frames)
    assert all(not np.array_equal(a, b) for a, b in zip(before.dehazed, after.dehazed))


def test_tree_gradient_through_dehazing(rng):
    tree = _tree(3, 3, seed=4, grid=3, size=9)
    for name, p in tree.params().items():
        if name.endswith(".bias"):
            p[:] = rng.uniform(0.05, 0.3, size=p.shape)
    frames = [rng.uniform(0.05, 0.95, size=(1, 3, 9, 9)) for _ in range(5)]
    obj = rng.uniform(size=(1, 3, 3)) < 0.5
    cls = rng.integers(0, 2, size=(1, 3, 3))
    logits, cache = tree.forward(frames)
    _, g = detection_loss(logits, obj, cls)
    grads = tree.backward(cache, g)
    assert set(grads) == set(tree.params())
    f = lambda: detection_loss(tree.forward(frames)[0], obj, cls)[0]

    def pattern():
        _, c = tree.forward(frames)
        parts = [(c.head.feats[n.name] > 0).ravel() for n in tree.head.nodes if n.relu]
        for dc in c.dehaze:
            parts += [(dc.feats[n.name] > 0).ravel() for n in tree.dehaze.nodes if n.relu]
        return np.concatenate(parts)

    params = tree.params()
    for name in ("dehaze/c0.conv1.weight", "dehaze/conv5.weight", "head/b1.conv1.weight", "head/fuse2.bias"):
        err, n = check_gradient(f, params[name], grads[name], rng, n_samples=10, pattern=pattern)
        assert n > 0 and err < 1e-4, name


def test_dehazing_gradients_mostly_nonzero(clips):
    tree = _tree()
    clip = clips[0]
    frames = [clip.hazy[[min(i, 5)]] for i in range(5)]
    obj, cls = grid_labels(clip.classes[[2]], 6)
    logits, cache = tree.forward(frames)
    _, g = detection_loss(logits, obj, cls)
    grads = tree.backward(cache, g)
    flat = np.concatenate([v.ravel() for k, v in grads.items() if k.startswith("dehaze/")])
    assert np.mean(flat == 0) < 0.5


def test_detection_loss_closed_forms(rng):
    obj = rng.uniform(size=(4, 5, 5)) < 0.5
    cls = rng.integers(0, 2, size=(4, 5, 5))
    perfect = np.zeros((4, 3, 5, 5))
    perfect[:, 0] = np.where(obj, 10.0, -10.0)
    perfect[:, 1] = np.where(cls == 0, 10.0, -10.0)
    perfect[:, 2] = -perfect[:, 1]
    assert detection_loss(perfect, obj, cls)[0] < 1e-3
    uniform, _ = detection_loss(np.zeros((4, 3, 5, 5)), obj, cls)
    assert uniform == pytest.approx(math.log(2) + math.log(2) * obj.mean(), rel=1e-12)


def test_detection_loss_gradient(rng):
    logits = rng.normal(size=(2, 3, 4, 4))
    obj = rng.uniform(size=(2, 4, 4)) < 0.4
    cls = rng.integers(0, 2, size=(2, 4, 4))
    _, g = detection_loss(logits, obj, cls)
    err, _ = check_gradient(lambda: detection_loss(logits, obj, cls)[0], logits, g, rng)
    assert err < 1e-6
    with pytest.raises(ContractError):
        detection_loss(logits, obj[:, :2], cls)


def test_grid_labels_coverage_and_majority():
    classes = np.full((4, 4), -1)
    classes[0:2, 0:2] = 1  # full cell, class 1
    classes[0, 2:4] = 0  # half cell, class 0
    classes[2, 2] = 0  # quarter cell
    obj, cls = grid_labels(classes, 2)
    assert obj.tolist() == [[True, True], [False, False]]
    assert cls[0, 0] == 1 and cls[0, 1] == 0
    with pytest.raises(ContractError):
        grid_labels(classes, 3)


def test_average_precision_oracles(rng):
    assert average_precision([0.9, 0.8, 0.1], [True, True, False]) == 1.0
    assert average_precision([0.9, 0.8, 0.1], [False, True, True]) == pytest.approx((0.5 + 2 / 3) / 2)
    pos = rng.uniform(size=200) < 0.3
    assert average_precision(np.full(200, 0.5), pos) == pytest.approx(pos.mean(), rel=1e-12)
    assert math.isnan(average_precision([0.1, 0.2], [False, False]))


def test_toy_map_perfect_and_warning():
    obj = np.array([[[True, False], [True, False]]])
    cls = np.array([[[0, 0], [1, 0]]])
    logits = np.zeros((1, 3, 2, 2))
    logits[:, 0] = np.where(obj, 10, -10)
    logits[:, 1] = np.where(cls == 0, 10, -10)
    logits[:, 2] = -logits[:, 1]
    res = toy_map(lambda fr: logits, [(None, obj, cls)])
    assert res.map == 1.0
    with pytest.warns(UserWarning, match="no positive"):
        res = toy_map(lambda fr: logits, [(None, obj, np.zeros_like(cls))])
    assert math.isnan(res.ap[1]) and res.map == res.ap[0]


def test_class_scores_bounded(rng):
    s = class_scores(rng.normal(size=(2, 3, 4, 4)) * 5)
    assert s.shape == (2, 2, 4, 4) and s.min() >= 0 and np.all(s.sum(axis=1) <= 1 + 1e-12)


def test_split_init_head_equivalence(rng):
    single = build_head(1, 4, 3)
    for name, p in single.params().items():
        if name.endswith(".bias"):
            p[:] = rng.uniform(0.0, 0.2, size=p.shape)
    multi = split_init_head(single, 3)
    x = rng.uniform(size=(2, 3, 24, 24))
    np.testing.assert_allclose(multi.forward([x] * 3)[0], single.forward([x])[0], atol=1e-12)


def test_two_step_budget_zero_unchanged(clips):
    tree = _tree()
    before = {k: v.copy() for k, v in tree.params().items()}
    two_step_train(tree, clips, JointConfig(budget=0, batch=2))
    assert all(np.array_equal(before[k], v) for k, v in tree.params().items())


def test_phase1_freezes_all_but_post_fusion(clips):
    tree = _tree()
    before = {k: v.copy() for k, v in tree.params().items()}
    res = two_step_train(tree, clips, JointConfig(budget=10, batch=2, lr=0.01))
    p1 = res.after_phase1.tensors
    for k, v in before.items():
        post = k.startswith("head/fuse")
        assert np.array_equal(p1[k], v) != post, k
    final = res.checkpoint.tensors
    assert not np.array_equal(final["dehaze/c0.conv1.weight"], p1["dehaze/c0.conv1.weight"])
    assert len(res.phase1_losses) == 9 and len(res.phase2_losses) == 1


def test_tree_checkpoint_round_trip(clips, tmp_path, rng):
    tree = _tree()
    path = save_checkpoint(tree.to_checkpoint(), tmp_path / "t.evdn")
    again = TreeNet.from_checkpoint(load_checkpoint(path))
    frames = [rng.uniform(size=(1, 3, 24, 24)) for _ in range(5)]
    np.testing.assert_array_equal(again.forward(frames)[0], tree.forward(frames)[0])


def test_train_head_reduces_loss(clips):
    head = build_head(1, 4, 0)
    losses = train_head(head, clips, 80, lr=0.05, batch=4)
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
