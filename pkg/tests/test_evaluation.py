import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spformer.evaluation import (
    EvaluationError,
    confusion_matrix,
    majority_accuracy,
    occlude_image,
    patch_grid_labels,
    pool_reports,
    robustness_eval,
    rotate_image,
    superpixel_quality,
)
from spformer.geometry import build_grid, hard_assign
from spformer.sca import AssociationMap
from spformer.tensor import Tensor


def test_single_superpixel_two_classes():
    gt = np.repeat([[0], [0], [1], [1]], 4, axis=1)
    rep = superpixel_quality(np.zeros((4, 4), int), gt, num_classes=2)
    np.testing.assert_array_equal(rep.confusion, [[8, 0, 0], [8, 0, 0]])
    assert rep.iou.tolist() == [0.5, 0.0]
    assert rep.miou == 0.25


def test_hand_computed_confusion():
    gt = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 1, 1], [2, 2, 2, 2]])
    seg = np.repeat([[0, 0, 1, 1]], 4, axis=0)
    rep = superpixel_quality(seg, gt, num_classes=3)
    np.testing.assert_array_equal(rep.confusion[:, :3], [[4, 0, 0], [0, 6, 0], [4, 2, 0]])
    np.testing.assert_allclose(rep.iou, [0.5, 0.75, 0.0])
    assert rep.miou == pytest.approx(1.25 / 3, abs=0)
    assert rep.macc == pytest.approx(2 / 3, abs=0)
    text = rep.to_text()
    assert "method=model\n" in text and "iou_1=0.75\n" in text
    assert rep.to_json().startswith('{"method":"model","miou":0.416667')


def test_gt_as_prediction_is_perfect():
    gt = np.random.default_rng(0).integers(0, 5, (8, 8))
    rep = superpixel_quality(gt, gt, num_classes=5)
    assert rep.miou == 1.0 and rep.macc == 1.0


def test_ignore_label_is_excluded():
    gt = np.array([[0, 0, 255, 1], [0, 255, 1, 1]])
    seg = np.array([[0, 0, 0, 1], [0, 0, 1, 1]])
    rep = superpixel_quality(seg, gt, num_classes=2)
    assert rep.n_pixels == 6 and rep.miou == 1.0


def dense_soft_quality(A_dense, gt, k):
    """Dense reference of the soft protocol: (heads, Np, Ns) weights."""
    Y = np.eye(k)[gt.ravel()]
    preds = []
    for A in A_dense:
        votes = A.T @ Y
        mass = votes.sum(1, keepdims=True)
        preds.append(A @ np.where(mass > 0, votes / np.where(mass > 0, mass, 1), 0))
    pred = np.mean(preds, 0).argmax(1)
    cm = np.zeros((k, k), int)
    for g, p in zip(gt.ravel(), pred):
        cm[g, p] += 1
    return cm


@pytest.mark.parametrize("seed", range(8))
def test_soft_protocol_matches_dense(seed):
    rng = np.random.default_rng(seed)
    grid = build_grid(8, 8, 2)
    raw = rng.random((2, grid.n_pixels, 9)) ** 4 * grid.neighbors.valid
    A = AssociationMap(Tensor(raw / raw.sum(-1, keepdims=True)), grid)
    gt = rng.integers(0, 3, (8, 8))
    rep = superpixel_quality(A, gt, num_classes=3)
    np.testing.assert_array_equal(rep.confusion[:, :3], dense_soft_quality(A.dense(), gt, 3))
    assert len(rep.head_mious) == 2 and rep.best_head_miou == max(rep.head_mious)


def test_one_hot_soft_equals_hard_counting():
    rng = np.random.default_rng(1)
    grid = build_grid(8, 8, 2)
    slots = np.array([rng.choice(np.nonzero(v)[0]) for v in grid.neighbors.valid])
    labels = grid.neighbors.index[np.arange(grid.n_pixels), slots]
    A = AssociationMap.one_hot(labels[None], grid)
    gt = rng.integers(0, 4, (8, 8))
    soft = superpixel_quality(A, gt, num_classes=4)
    hard = superpixel_quality(labels.reshape(8, 8), gt, num_classes=4)
    via_argmax = superpixel_quality(hard_assign(A), gt, num_classes=4)
    np.testing.assert_array_equal(soft.confusion, hard.confusion)
    np.testing.assert_array_equal(via_argmax.confusion, hard.confusion)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_invariant_to_class_permutation(seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 4, (6, 6))
    seg = rng.integers(0, 5, (6, 6))
    perm = rng.permutation(4)
    a = superpixel_quality(seg, gt, num_classes=4)
    b = superpixel_quality(seg, perm[gt], num_classes=4)
    # majority ties break toward the lower id, so compare tie-free cases only
    counts = np.zeros((5, 4), int)
    np.add.at(counts, (seg.ravel(), gt.ravel()), 1)
    top = np.sort(counts, 1)
    if np.any((top[:, -1] == top[:, -2]) & (top[:, -1] > 0)):
        return
    assert a.miou == pytest.approx(b.miou, abs=1e-12)
    np.testing.assert_allclose(np.sort(a.iou[a.present]), np.sort(b.iou[b.present]))


def test_refinement_never_lowers_majority_accuracy():
    # split a segment in every possible way on small grids
    rng = np.random.default_rng(2)
    for trial in range(30):
        h, w = rng.integers(2, 5, 2)
        gt = rng.integers(0, 3, (h, w))
        seg = rng.integers(0, 3, (h, w))
        base = majority_accuracy(seg, gt)
        for s in np.unique(seg):
            idx = np.flatnonzero(seg.ravel() == s)
            if idx.size > 10:
                idx = idx[:10]
            for mask in itertools.product([0, 1], repeat=idx.size):
                refined = seg.ravel().copy()
                refined[idx[np.array(mask, bool)]] = seg.max() + 1
                assert majority_accuracy(refined, gt.ravel()) >= base - 1e-12


def test_patch_grid_loses_to_boundary_following_assignment():
    h = w = 8
    grid = build_grid(h, w, 4)
    yy, xx = np.mgrid[0:h, 0:w]
    gt = (yy > xx).astype(int)
    # superpixel 1 (top right) takes the upper triangle, 2 (bottom left) the rest
    labels = np.where(gt.ravel() == 1, 2, 1)
    learned = superpixel_quality(AssociationMap.one_hot(labels[None], grid), gt, num_classes=2)
    patch = superpixel_quality(patch_grid_labels(h, w, 4), gt, num_classes=2)
    assert learned.miou == 1.0
    assert patch.miou < learned.miou


def test_full_and_feature_resolution():
    grid = build_grid(4, 4, 2)
    A = AssociationMap.one_hot(grid.containing[None], grid)
    gt_full = np.kron(np.array([[0, 0, 1, 1]] * 4), np.ones((2, 2), int))
    full = superpixel_quality(A, gt_full, num_classes=2, resolution="full")
    feat = superpixel_quality(A, gt_full, num_classes=2, resolution="feature")
    assert full.n_pixels == 64 and feat.n_pixels == 16
    assert full.miou == feat.miou == 1.0
    with pytest.raises(EvaluationError):
        superpixel_quality(A, np.zeros((5, 5), int), num_classes=2)


def test_pooling_adds_confusions():
    gt = np.array([[0, 1], [1, 1]])
    a = superpixel_quality(np.zeros((2, 2), int), gt, 2)
    b = superpixel_quality(np.arange(4).reshape(2, 2), gt, 2)
    np.testing.assert_array_equal(pool_reports([a, b]).confusion, a.confusion + b.confusion)


def test_confusion_matrix_counts_unpredicted_as_misses():
    cm = confusion_matrix(np.array([0, -1, 1]), np.array([0, 0, 1]), 2)
    np.testing.assert_array_equal(cm, [[1, 0, 1], [0, 1, 0]])


def test_rotation_properties():
    rng = np.random.default_rng(3)
    img = rng.random((24, 24, 3))
    np.testing.assert_allclose(rotate_image(img, 0), img, atol=1e-6)
    assert np.abs(rotate_image(img, 360) - img).mean() < 1e-3
    rot = rotate_image(img, 45, fill=[1.0, 2.0, 3.0])
    np.testing.assert_array_equal(rot[0, 0], [1.0, 2.0, 3.0])


def test_occlusion():
    img = np.random.default_rng(4).random((10, 12, 3))
    full = occlude_image(img, ratio=1.0, fill=[0.5, 0.5, 0.5])
    assert np.all(full == 0.5)
    part = occlude_image(img, box=(0, 0, 2, 3), fill=0.0)
    assert np.all(part[:2, :3] == 0) and np.array_equal(part[2:], img[2:])


def test_robustness_identity_equals_clean():
    rng = np.random.default_rng(5)
    imgs = rng.random((12, 8, 8, 3))
    labels = rng.integers(0, 3, 12)
    scorer = lambda x: np.stack([x[..., c].mean((1, 2)) for c in range(3)], -1)  # noqa: E731
    rep = robustness_eval(scorer, imgs, labels, {"identity": lambda x: x})
    assert list(rep.accuracy) == ["clean", "identity"]
    assert rep.accuracy["identity"] == rep.accuracy["clean"]
    with pytest.raises(EvaluationError):
        robustness_eval(scorer, imgs[:0], labels[:0])
    default = robustness_eval(scorer, imgs, labels)
    assert list(default.accuracy) == ["clean", "rot15", "rot30", "rot45"]
